"""Losses, synthetic data generation, augmentation and the Adam loop."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .config import LossWeights, TrainConfig
from .tensor import ContractError, ShapeError, Tensor, save_checkpoint
from .trimap import AlphaMatte, Region, Trimap, trimap_from_alpha


@dataclass
class TrainSample:
    composite: np.ndarray  # [3,H,W] float in [0,1]
    trimap: Trimap
    alpha: np.ndarray      # [H,W] ground truth
    fg: np.ndarray         # [3,H,W]
    bg: np.ndarray         # [3,H,W]


# -- losses ------------------------------------------------------------------


def loss_l1(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean absolute difference over all pixels."""
    if pred.shape[-2:] != gt.shape[-2:]:
        raise ShapeError(f"l1 loss size mismatch: {pred.shape} vs {gt.shape}")
    gt = gt.reshape(pred.shape).astype(pred.dtype)
    return T.tmean(T.absolute(pred - gt))


def loss_comp(pred: Tensor, sample: TrainSample) -> Tensor:
    """Mean absolute difference between the sample's composite and the one
    re-composited from its F/B with the predicted alpha."""
    if sample.fg is None or sample.bg is None:
        raise ContractError("composition loss needs ground-truth F and B")
    a = T.reshape(pred, (1,) + pred.shape[-2:])
    fg = sample.fg.astype(pred.dtype)
    bg = sample.bg.astype(pred.dtype)
    recomposed = T.add(T.mul(a, fg), T.mul(1.0 - a, bg))
    target = sample.composite.astype(pred.dtype)
    return T.tmean(T.absolute(recomposed - target))


_BINOMIAL3 = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16


def _blur5(x: Tensor) -> Tensor:
    """5x5 binomial (1,4,6,4,1) Gaussian blur with zero padding.

    Composed from two 3x3 binomial passes: padding by 2 up front and running
    both passes valid is exactly the 5x5 zero-padded convolution.
    """
    w = Tensor(_BINOMIAL3.astype(x.dtype).reshape(1, 1, 3, 3))
    return T.conv2d(T.conv2d(x, w, stride=1, pad=2), w, stride=1, pad=0)


def _pyramid(x: Tensor, levels: int):
    """Laplacian pyramid: band-pass maps plus the final low-pass residual."""
    maps = []
    cur = x
    for _ in range(levels - 1):
        blurred = _blur5(cur)
        down = blurred[:, ::2, ::2]
        up = T.upsample_bilinear(down, 2)
        maps.append(cur - up)
        cur = down
    maps.append(cur)
    return maps


def loss_lap(pred: Tensor, gt: np.ndarray, levels: int = 5) -> Tensor:
    """Sum over pyramid levels of 2^i * L1 between the band maps."""
    if levels < 1:
        raise ValueError("pyramid needs at least one level")
    h, w = pred.shape[-2:]
    step = 2 ** (levels - 1)
    if h % step or w % step:
        raise ShapeError(
            f"{h}x{w} not divisible by 2^{levels - 1} for {levels} levels")
    p = T.reshape(pred, (1, h, w))
    g = Tensor(gt.reshape(1, h, w).astype(pred.dtype))
    pp = _pyramid(p, levels)
    gp = _pyramid(g, levels)
    total = None
    for i, (a, b) in enumerate(zip(pp, gp)):
        term = T.mul(T.tmean(T.absolute(a - b)), float(2 ** i))
        total = term if total is None else T.add(total, term)
    return total


def loss_total(fused, sample: TrainSample, weights: LossWeights,
               lap_levels=5, intermediate_weight=0.5):
    """Weighted matting loss over the fused maps.

    The final fused alpha gets full weight; earlier fused maps contribute at
    `intermediate_weight`.
    """
    total = None
    n = len(fused)
    for i, alpha in enumerate(fused):
        w_out = 1.0 if i == n - 1 else intermediate_weight
        if w_out == 0.0:
            continue
        term = T.mul(loss_l1(alpha, sample.alpha), weights.w_l1)
        term = T.add(term, T.mul(loss_comp(alpha, sample), weights.w_comp))
        term = T.add(term,
                     T.mul(loss_lap(alpha, sample.alpha, lap_levels),
                           weights.w_lap))
        term = T.mul(term, w_out)
        total = term if total is None else T.add(total, term)
    return total


# -- synthetic data ----------------------------------------------------------


def _smooth_noise(rng, size, channels=3, cells=8):
    """Random low-frequency field: coarse grid upsampled bilinearly."""
    coarse = rng.uniform(0.0, 1.0, size=(channels, cells, cells))
    zoom = size / cells
    out = ndimage.zoom(coarse, (1, zoom, zoom), order=1, mode="nearest")
    return np.clip(out[:, :size, :size], 0.0, 1.0).astype(np.float64)


def synth_sample(rng_seed, size=96):
    """Procedural (fg, alpha, bg) triple with genuine soft alpha edges."""
    rng = np.random.default_rng(rng_seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    alpha = np.zeros((size, size), dtype=np.float64)
    for _ in range(rng.integers(2, 5)):
        cy = rng.uniform(0.25 * size, 0.75 * size)
        cx = rng.uniform(0.25 * size, 0.75 * size)
        radius = rng.uniform(0.12 * size, 0.28 * size)
        edge = rng.uniform(2.0, 0.08 * size)
        dist = np.hypot(yy - cy, xx - cx)
        disk = np.clip((radius - dist) / edge, 0.0, 1.0)
        alpha = np.maximum(alpha, disk)
    # one soft capsule stroke for elongated structure
    p0 = rng.uniform(0.2 * size, 0.8 * size, size=2)
    p1 = rng.uniform(0.2 * size, 0.8 * size, size=2)
    seg = p1 - p0
    seg_len2 = max(float(seg @ seg), 1e-9)
    t = np.clip(((yy - p0[0]) * seg[0] + (xx - p0[1]) * seg[1]) / seg_len2,
                0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * seg[0]), xx - (p0[1] + t * seg[1]))
    width = rng.uniform(0.03 * size, 0.06 * size)
    stroke = np.clip((width - dist) / max(2.0, 0.4 * width), 0.0, 1.0)
    alpha = np.maximum(alpha, stroke)
    fg = _smooth_noise(rng, size)
    bg = _smooth_noise(rng, size)
    # keep fg and bg visually separated so composition is informative
    fg = 0.55 + 0.45 * fg
    bg = 0.45 * bg
    return fg, alpha, bg


def _random_affine(rng, fg, alpha):
    """Random rotation, isotropic scale and horizontal flip."""
    angle = rng.uniform(-15.0, 15.0)
    scale = rng.uniform(0.85, 1.2)
    if rng.random() < 0.5:
        fg = fg[:, :, ::-1].copy()
        alpha = alpha[:, ::-1].copy()
    theta = np.deg2rad(angle)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]]) / scale
    size = alpha.shape[0]
    center = (size - 1) / 2.0
    offset = center - rot @ np.array([center, center])
    alpha_t = ndimage.affine_transform(alpha, rot, offset=offset, order=1,
                                       mode="constant", cval=0.0)
    fg_t = np.stack([ndimage.affine_transform(c, rot, offset=offset, order=1,
                                              mode="constant", cval=0.0)
                     for c in fg])
    return np.clip(fg_t, 0.0, 1.0), np.clip(alpha_t, 0.0, 1.0)


def augment_sample(fg, alpha, bg, cfg: TrainConfig, rng_seed) -> TrainSample:
    """Affine -> UK-biased crop -> color jitter -> composite.

    Deterministic under a fixed seed.  Falls back to a center crop when no
    unknown pixels survive the affine pass.
    """
    if cfg.crop % 32:
        raise ValueError(f"crop size {cfg.crop} must be divisible by 32")
    rng = np.random.default_rng(rng_seed)
    crop = cfg.crop
    radius = int(rng.integers(cfg.dilate_min, cfg.dilate_max + 1))

    fg_t, alpha_t = fg, alpha
    cy = cx = None
    for _ in range(5):
        fg_t, alpha_t = _random_affine(rng, fg, alpha)
        uk = trimap_from_alpha(AlphaMatte(alpha_t), cfg.trimap_lo,
                               cfg.trimap_hi, radius).labels == Region.UK
        ys, xs = np.nonzero(uk)
        if ys.size:
            pick = int(rng.integers(ys.size))
            cy, cx = int(ys[pick]), int(xs[pick])
            break
    size = alpha_t.shape[0]
    if size < crop:
        pad = crop - size
        alpha_t = np.pad(alpha_t, ((0, pad), (0, pad)))
        fg_t = np.pad(fg_t, ((0, 0), (0, pad), (0, pad)))
        size = crop
    if cy is None:
        cy = cx = size // 2
    y0 = int(np.clip(cy - crop // 2, 0, size - crop))
    x0 = int(np.clip(cx - crop // 2, 0, size - crop))
    alpha_c = alpha_t[y0:y0 + crop, x0:x0 + crop]
    fg_c = fg_t[:, y0:y0 + crop, x0:x0 + crop]

    gains = rng.uniform(0.9, 1.1, size=(3, 1, 1))
    shift = rng.uniform(-0.05, 0.05)
    fg_c = np.clip(fg_c * gains + shift, 0.0, 1.0)

    bsize = bg.shape[1]
    if bsize > crop:
        by = int(rng.integers(bsize - crop + 1))
        bx = int(rng.integers(bsize - crop + 1))
        bg_c = bg[:, by:by + crop, bx:bx + crop]
    else:
        bg_c = np.pad(bg, ((0, 0), (0, crop - bsize), (0, crop - bsize)))

    comp = alpha_c[None] * fg_c + (1.0 - alpha_c[None]) * bg_c
    trimap = trimap_from_alpha(AlphaMatte(alpha_c), cfg.trimap_lo,
                               cfg.trimap_hi, radius)
    return TrainSample(composite=comp, trimap=trimap, alpha=alpha_c,
                       fg=fg_c, bg=bg_c)


def make_sample(cfg: TrainConfig, rng_seed) -> TrainSample:
    fg, alpha, bg = synth_sample(rng_seed, size=cfg.crop + cfg.synth_margin)
    return augment_sample(fg, alpha, bg, cfg, rng_seed)


# -- optimization ------------------------------------------------------------


class Adam:

    def __init__(self, params, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainState:
    optimizer: Adam
    step: int = 0
    history: list = field(default_factory=list)


def sample_losses(model, sample: TrainSample, cfg: TrainConfig):
    out = model.forward(sample.composite, sample.trimap)
    weights = cfg.loss_weights()
    total = loss_total(out["fused"], sample, weights, cfg.lap_levels,
                       cfg.intermediate_weight)
    final = out["fused"][-1]
    parts = {
        "l1": loss_l1(final, sample.alpha).item(),
        "comp": loss_comp(final, sample).item(),
        "lap": loss_lap(final, sample.alpha, cfg.lap_levels).item(),
    }
    return total, parts


def train_step(state: TrainState, model, batch, cfg: TrainConfig):
    """One optimization step over a batch of samples; returns the loss."""
    state.optimizer.zero_grad()
    total = None
    parts_acc = {"l1": 0.0, "comp": 0.0, "lap": 0.0}
    for sample in batch:
        loss, parts = sample_losses(model, sample, cfg)
        total = loss if total is None else T.add(total, loss)
        for k in parts_acc:
            parts_acc[k] += parts[k] / len(batch)
    total = T.mul(total, 1.0 / len(batch))
    value = total.item()
    if not np.isfinite(value):
        raise ContractError(f"non-finite loss {value} at step {state.step}")
    total.backward()
    state.optimizer.step()
    state.step += 1
    return value, parts_acc


def train(model, cfg: TrainConfig, out_dir, steps=None, sample_pool=None,
          log=print):
    """Desk-scale training loop on synthetic composites.

    Logs (step, loss, sub-losses) to CSV and checkpoints periodically.
    `sample_pool` pins the data (overfit runs); otherwise samples are drawn
    per step from the seeded generator.
    """
    steps = steps if steps is not None else cfg.steps
    os.makedirs(out_dir, exist_ok=True)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    state = TrainState(optimizer=opt)
    log_path = os.path.join(out_dir, "train_log.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "l1", "comp", "lap"])
        for step in range(steps):
            if sample_pool is not None:
                batch = [sample_pool[(step * cfg.batch_size + i)
                                     % len(sample_pool)]
                         for i in range(cfg.batch_size)]
            else:
                batch = [make_sample(cfg, cfg.seed * 1_000_003
                                     + step * cfg.batch_size + i)
                         for i in range(cfg.batch_size)]
            value, parts = train_step(state, model, batch, cfg)
            state.history.append(value)
            writer.writerow([state.step, value, parts["l1"], parts["comp"],
                             parts["lap"]])
            if log and (step % cfg.log_every == 0 or step == steps - 1):
                log(f"step {state.step}: loss={value:.5f}")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(model.state_dict(),
                                os.path.join(out_dir, "model.ckpt"))
    save_checkpoint(model.state_dict(), os.path.join(out_dir, "model.ckpt"))
    return state
