"""Convolutional upsampling decoder with shortcut taps and progressive
refinement of the three multi-scale alpha outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import StageOutputs
from .nn import Conv3x3, ConvNormRelu, Module
from .tensor import Tensor


@dataclass
class DecoderConfig:
    #: channel width per level, deepest first (1/32 ... 1/1)
    widths: tuple = (256, 128, 64, 32, 16)
    #: residual block count per level; the deep-stack default targets the
    #: full-model parameter budget and is plain config, not architecture
    blocks: tuple = (10, 4, 2, 1, 1)
    norm_groups: int = 4


class ResidualBlock(Module):
    """conv-norm-relu -> conv-norm, skip connection, relu."""

    def __init__(self, ch, rng, groups=4, dtype=np.float32):
        self.conv1 = ConvNormRelu(ch, ch, rng, groups=groups, dtype=dtype)
        self.conv2 = ConvNormRelu(ch, ch, rng, groups=groups, dtype=dtype)

    def __call__(self, x):
        return T.add(x, self.conv2(self.conv1(x)))


def shortcut_project(feature: Tensor, proj: ConvNormRelu) -> Tensor:
    """Project an encoder tap to the decoder width; spatial size preserved."""
    return proj(feature)


@dataclass
class AlphaTriple:
    """Raw sigmoid alphas at output strides 8, 4 and 1 (pre-resize)."""
    os8: Tensor  # [1, H/8, W/8]
    os4: Tensor  # [1, H/4, W/4]
    os1: Tensor  # [1, H, W]


def _to_chw(x: Tensor) -> Tensor:
    return T.transpose(x, (2, 0, 1))


class Decoder(Module):

    def __init__(self, cfg: DecoderConfig, embed_dim, rng, dtype=np.float32):
        w0, w1, w2, w3, w4 = cfg.widths
        g = cfg.norm_groups
        e = embed_dim
        self.cfg = cfg

        self.bottleneck = ConvNormRelu(8 * e, w0, rng, groups=g, dtype=dtype)
        self.level0 = [ResidualBlock(w0, rng, g, dtype)
                       for _ in range(cfg.blocks[0])]
        self.shortcut3 = ConvNormRelu(4 * e, w0, rng, groups=g, dtype=dtype)
        self.trans1 = ConvNormRelu(w0, w1, rng, groups=g, dtype=dtype)
        self.level1 = [ResidualBlock(w1, rng, g, dtype)
                       for _ in range(cfg.blocks[1])]
        self.shortcut2 = ConvNormRelu(2 * e, w1, rng, groups=g, dtype=dtype)
        self.trans2 = ConvNormRelu(w1, w2, rng, groups=g, dtype=dtype)
        self.level2 = [ResidualBlock(w2, rng, g, dtype)
                       for _ in range(cfg.blocks[2])]
        self.head8 = Conv3x3(w2, 1, rng, dtype=dtype)
        self.shortcut1 = ConvNormRelu(2 * e, w2, rng, groups=g, dtype=dtype)
        self.trans3 = ConvNormRelu(w2, w3, rng, groups=g, dtype=dtype)
        self.level3 = [ResidualBlock(w3, rng, g, dtype)
                       for _ in range(cfg.blocks[3])]
        self.head4 = Conv3x3(w3, 1, rng, dtype=dtype)
        self.trans4 = ConvNormRelu(w3, w4, rng, groups=g, dtype=dtype)
        self.level4 = [ResidualBlock(w4, rng, g, dtype)
                       for _ in range(cfg.blocks[4])]
        self.shortcut_img = ConvNormRelu(6, w4, rng, groups=2, dtype=dtype)
        self.head1 = Conv3x3(w4, 1, rng, dtype=dtype)

    def forward(self, stages: StageOutputs, image6: Tensor) -> AlphaTriple:
        s1, s2, s3, s4 = [_to_chw(s) for s in stages.stages]
        emb = _to_chw(stages.embedded)

        x = self.bottleneck(s4)
        for blk in self.level0:
            x = blk(x)
        x = T.upsample_bilinear(x, 2)
        x = T.add(x, shortcut_project(s3, self.shortcut3))
        x = self.trans1(x)
        for blk in self.level1:
            x = blk(x)
        x = T.upsample_bilinear(x, 2)
        x = T.add(x, shortcut_project(s2, self.shortcut2))
        x = self.trans2(x)
        for blk in self.level2:
            x = blk(x)
        os8 = T.sigmoid(self.head8(x))

        x = T.upsample_bilinear(x, 2)
        tap14 = T.concat([s1, emb], axis=0)
        x = T.add(x, shortcut_project(tap14, self.shortcut1))
        x = self.trans3(x)
        for blk in self.level3:
            x = blk(x)
        os4 = T.sigmoid(self.head4(x))

        x = T.upsample_bilinear(x, 2)
        x = self.trans4(x)
        for blk in self.level4:
            x = blk(x)
        x = T.upsample_bilinear(x, 2)
        x = T.add(x, shortcut_project(image6, self.shortcut_img))
        os1 = T.sigmoid(self.head1(x))
        return AlphaTriple(os8=os8, os4=os4, os1=os1)


def prm_fuse(triple: AlphaTriple):
    """Progressively fuse the three outputs at full resolution.

    The base map is the resized 1/8 output; at each later level a binary
    self-guidance mask keeps pixels whose previous value was already 0 or 1
    (strict inequalities, no epsilon band) and replaces the rest with the
    current raw map.  Returns (final alpha, [base, mid, final] fused maps).
    """
    base = T.upsample_bilinear(triple.os8, 8)
    raw4 = T.upsample_bilinear(triple.os4, 4)
    fused = [base]
    prev = base
    for raw in (raw4, triple.os1):
        gate = ((prev.data > 0.0) & (prev.data < 1.0)).astype(prev.dtype)
        cur = T.add(T.mul(raw, gate), T.mul(prev, 1.0 - gate))
        fused.append(cur)
        prev = cur
    return fused[-1], fused
