"""Hierarchical 4-stage encoder: patch embedding of the 6-channel input,
prior-attentive blocks, patch merging between stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import PastBlock, PriorMemory, PriorMode, n_prior_for
from .nn import LayerNorm, Linear, Module, trunc_normal
from .tensor import Parameter, ShapeError, Tensor
from .trimap import Trimap, region_downsample


@dataclass
class EncoderConfig:
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    heads: tuple = (3, 6, 12, 24)
    window: int = 7
    prior_mode: PriorMode = PriorMode.UK_FG_BG_MEMORY
    input_channels: int = 6

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("depths and heads must each have 4 entries")

    def stage_dim(self, stage):
        return self.embed_dim * 2 ** stage


@dataclass
class StageOutputs:
    """Feature maps the decoder taps: the embedded 1/4 map plus the output
    of every stage (1/4, 1/8, 1/16, 1/32)."""
    embedded: Tensor
    stages: list = field(default_factory=list)


class PatchEmbed(Module):
    """Non-overlapping 4x4 patch projection + norm.

    The projection weight is stored as separate RGB and trimap halves so a
    3-channel pretrained patch embedding could be imported into the RGB half.
    """

    def __init__(self, embed_dim, rng, dtype=np.float32):
        self.weight_rgb = Parameter(trunc_normal(rng, (48, embed_dim),
                                                 dtype=dtype))
        self.weight_trimap = Parameter(trunc_normal(rng, (48, embed_dim),
                                                    dtype=dtype))
        self.bias = Parameter(np.zeros(embed_dim, dtype=dtype))
        self.norm = LayerNorm(embed_dim, dtype=dtype)
        self.embed_dim = embed_dim

    def __call__(self, image6: Tensor) -> Tensor:
        c, h, w = image6.shape
        if c != 6:
            raise ShapeError(f"expected 6 input channels, got {c}")
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} must be divisible by 32")
        patches = T.reshape(image6, (6, h // 4, 4, w // 4, 4))
        patches = T.transpose(patches, (1, 3, 0, 2, 4))
        patches = T.reshape(patches, (h // 4, w // 4, 96))
        weight = T.concat([self.weight_rgb, self.weight_trimap], axis=0)
        y = T.add(T.matmul(patches, weight), self.bias)
        return self.norm(y)


class PatchMerging(Module):
    """2x2 neighborhood concat (4d) -> norm -> linear to 2d."""

    def __init__(self, dim, rng, dtype=np.float32):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h, w, d = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even grid, got {h}x{w}")
        x0 = x[0::2, 0::2]
        x1 = x[1::2, 0::2]
        x2 = x[0::2, 1::2]
        x3 = x[1::2, 1::2]
        y = T.concat([x0, x1, x2, x3], axis=2)
        return self.reduction(self.norm(y))


class Encoder(Module):

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.embed_dim, rng, dtype=dtype)
        self.stages = []
        self.merges = []
        for s in range(4):
            dim = cfg.stage_dim(s)
            blocks = []
            for b in range(cfg.depths[s]):
                blocks.append(PastBlock(
                    dim, cfg.heads[s], cfg.window, shifted=(b % 2 == 1),
                    n_prior=n_prior_for(cfg.prior_mode, b), rng=rng,
                    dtype=dtype))
            self.stages.append(blocks)
            if s < 3:
                self.merges.append(PatchMerging(dim, rng, dtype=dtype))
        self.memories = [PriorMemory(s) for s in range(4)]

    def forward(self, image6: Tensor, trimap: Trimap,
                capture=None) -> StageOutputs:
        if (trimap.height, trimap.width) != image6.shape[1:]:
            raise ShapeError(
                f"trimap {trimap.labels.shape} does not match image "
                f"{image6.shape[1:]}")
        x = self.patch_embed(image6)
        out = StageOutputs(embedded=x)
        mode = self.cfg.prior_mode
        for s, blocks in enumerate(self.stages):
            memory = self.memories[s]
            memory.clear()
            regions = region_downsample(trimap, 4 * 2 ** s)
            for b, block in enumerate(blocks):
                cap = None
                if capture is not None:
                    cap = _BlockCapture(capture, s, b)
                x = block.forward(x, regions, memory, mode, capture=cap)
            out.stages.append(x)
            if s < 3:
                x = self.merges[s](x)
        return out


class _BlockCapture(list):
    """Routes a block's attention record into the shared capture list."""

    def __init__(self, sink, stage, block):
        super().__init__()
        self._sink = sink
        self._stage = stage
        self._block = block

    def append(self, record):
        record["stage"] = self._stage
        record["block"] = self._block
        self._sink.append(record)
