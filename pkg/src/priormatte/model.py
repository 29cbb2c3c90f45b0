"""Full matting model: encoder + decoder + progressive fusion, plus
parameter counting and inference with trimap clamping."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import Decoder, prm_fuse
from .encoder import Encoder
from .nn import Module
from .tensor import Tensor, no_grad
from .trimap import AlphaMatte, Region, Trimap, one_hot_trimap


class MattingModel(Module):

    def __init__(self, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg.dtype).type
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_config(), rng, dtype=dtype)
        self.decoder = Decoder(cfg.decoder_config(), cfg.embed_dim, rng,
                               dtype=dtype)

    def build_input(self, image_planes: np.ndarray, trimap: Trimap) -> Tensor:
        """Stack RGB planes with the one-hot trimap into the 6-channel input."""
        dtype = np.dtype(self.cfg.dtype).type
        stacked = np.concatenate(
            [image_planes.astype(dtype), one_hot_trimap(trimap).astype(dtype)],
            axis=0)
        return Tensor(stacked)

    def forward(self, image_planes: np.ndarray, trimap: Trimap, capture=None):
        """Run the network; returns raw triple, fused maps and final alpha."""
        image6 = self.build_input(image_planes, trimap)
        stages = self.encoder.forward(image6, trimap, capture=capture)
        triple = self.decoder.forward(stages, image6)
        final, fused = prm_fuse(triple)
        return {"triple": triple, "fused": fused, "final": final}

    def infer(self, image_planes: np.ndarray, trimap: Trimap,
              clamp=True) -> AlphaMatte:
        """Predict an alpha matte; known trimap regions are clamped by default
        (FG -> 1, BG -> 0), standard matting post-processing."""
        with no_grad():
            out = self.forward(image_planes, trimap)
        alpha = out["final"].data[0].astype(np.float64)
        if clamp:
            alpha = alpha.copy()
            alpha[trimap.labels == Region.FG] = 1.0
            alpha[trimap.labels == Region.BG] = 0.0
        return AlphaMatte(np.clip(alpha, 0.0, 1.0))


def count_params(model: Module):
    """Exact learnable-scalar count with a per-top-level-module breakdown."""
    breakdown = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        breakdown[top] = breakdown.get(top, 0) + p.size
    return sum(breakdown.values()), breakdown


def bias_slot_count(cfg: ModelConfig):
    """Symbolic count of prior bias slots: sum over blocks of heads * N_p."""
    from .attention import n_prior_for
    total = 0
    for s in range(4):
        for b in range(cfg.depths[s]):
            total += cfg.heads[s] * n_prior_for(cfg.prior_mode_enum(), b)
    return total
