"""Built-in oracle suite behind the `selfcheck` CLI command.

Each check compares a fast implementation against an independent slow
reference (loops, closed forms, finite differences) and reports pass/fail.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .attention import compute_prior_tokens
from .decoder import AlphaTriple, prm_fuse
from .tensor import Tensor, finite_diff_check, use_dtype
from .trimap import RegionMap, Trimap, region_downsample


def _check_matmul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a), Tensor(b)).data
    return float(np.abs(got - ref).max()) < 1e-6


def _check_conv(rng):
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), stride=1, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(got)
    for o in range(3):
        for y in range(5):
            for xx in range(6):
                acc = 0.0
                for c in range(2):
                    for ky in range(3):
                        for kx in range(3):
                            acc += xp[c, y + ky, xx + kx] * w[o, c, ky, kx]
                ref[o, y, xx] = acc
    return float(np.abs(got - ref).max()) < 1e-5


def _check_softmax(rng):
    x = rng.standard_normal((4, 7))
    y = T.softmax_last_dim(Tensor(x)).data
    return float(np.abs(y.sum(axis=-1) - 1.0).max()) < 1e-6


def _check_gelu():
    xs = np.linspace(-5.0, 5.0, 101)
    got = T.gelu(Tensor(xs)).data
    ref = np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))
                    for v in xs])
    return float(np.abs(got - ref).max()) < 1e-3


def _check_gradients(rng):
    with use_dtype(np.float64):
        w1 = rng.standard_normal((5, 4))
        w2 = rng.standard_normal((4, 1))
        x0 = rng.standard_normal((2, 5))

        def f(x):
            return T.tsum(T.matmul(T.tanh(T.matmul(x, Tensor(w1))),
                                   Tensor(w2)))

        return finite_diff_check(f, Tensor(x0)) < 1e-6


def _check_prior_tokens(rng):
    tokens = rng.standard_normal((16, 5))
    labels = rng.integers(0, 3, size=(4, 4)).astype(np.uint8)
    uk, fg, bg = compute_prior_tokens(Tensor(tokens), RegionMap(labels))
    got = {1: uk.data, 2: fg.data, 0: bg.data}
    for region, value in got.items():
        members = [tokens[i] for i in range(16)
                   if labels.ravel()[i] == region]
        ref = (np.mean(members, axis=0) if members
               else np.zeros(5))
        if float(np.abs(value - ref).max()) >= 1e-6:
            return False
    return True


def _check_prm(rng):
    os8 = Tensor(rng.uniform(0, 1, size=(1, 4, 4)))
    os4 = Tensor(rng.uniform(0, 1, size=(1, 8, 8)))
    os1 = Tensor(rng.uniform(0, 1, size=(1, 32, 32)))
    final, fused = prm_fuse(AlphaTriple(os8, os4, os1))
    base = fused[0].data
    for prev, cur in zip(fused[:-1], fused[1:]):
        confident = (prev.data <= 0.0) | (prev.data >= 1.0)
        if not np.array_equal(cur.data[confident], prev.data[confident]):
            return False
    return final.data.shape == (1, 32, 32) and base.shape == (1, 32, 32)


def _check_regions(rng):
    labels = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
    regions = region_downsample(Trimap(labels), 4)
    counts = np.bincount(regions.labels.ravel(), minlength=3)
    return int(counts.sum()) == 16


def run_selfcheck(log=print):
    """Run every oracle check; returns True when all pass."""
    rng = np.random.default_rng(7)
    checks = [
        ("matmul vs triple loop", lambda: _check_matmul(rng)),
        ("conv2d vs direct loops", lambda: _check_conv(rng)),
        ("softmax normalization", lambda: _check_softmax(rng)),
        ("gelu vs erf reference", _check_gelu),
        ("finite-difference gradients", lambda: _check_gradients(rng)),
        ("prior tokens vs loop means", lambda: _check_prior_tokens(rng)),
        ("progressive fusion invariants", lambda: _check_prm(rng)),
        ("region map label budget", lambda: _check_regions(rng)),
    ]
    ok = True
    for name, fn in checks:
        passed = bool(fn())
        ok &= passed
        if log:
            log(f"[{'PASS' if passed else 'FAIL'}] {name}")
    return ok
