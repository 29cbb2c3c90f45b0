"""Acceptance suite: one test per headline requirement, each printing a
[PASS]/[FAIL] line with the measured numbers (run pytest with -s to see the
lines for passing tests)."""

import os
import csv

import numpy as np
import pytest

import priormatte.tensor as T
from priormatte.attention import (PastBlock, PriorMemory, PriorMode,
                                  WindowAttention, compute_prior_tokens,
                                  cyclic_shift, n_prior_for,
                                  shift_attention_mask, window_partition,
                                  window_reverse)
from priormatte.config import TrainConfig, tiny_model_config, toy_model_config
from priormatte.decoder import AlphaTriple, prm_fuse
from priormatte.diagnostics import capture_records_to_report
from priormatte.encoder import Encoder, EncoderConfig
from priormatte.metrics import compute_metrics
from priormatte.model import MattingModel, bias_slot_count, count_params
from priormatte.nn import (ConvNormRelu, GroupNorm, LayerNorm, Linear, Mlp,
                           trunc_normal)
from priormatte.tensor import Tensor, finite_diff_check, no_grad, use_dtype
from priormatte.training import loss_total, make_sample, train
from priormatte.trimap import AlphaMatte, Region, RegionMap, Trimap
from reference import metric_oracle

RUNS_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "runs")


def verdict(name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f": {detail}"
    print(line)
    assert ok, line


def toy_train_config(**kw):
    base = dict(crop=64, synth_margin=32, batch_size=1, checkpoint_every=0,
                log_every=1000)
    base.update(kw)
    return TrainConfig(**base)


def mean_eval_sad(model, eval_samples):
    vals = []
    for s in eval_samples:
        pred = model.infer(s.composite, s.trimap)
        rep = compute_metrics(pred, AlphaMatte(s.alpha), s.trimap)
        vals.append(rep.sad)
    return float(np.mean(vals))


# -- shared expensive fixtures ------------------------------------------------


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """200-step single-sample training run shared by two tests."""
    cfg = toy_train_config(steps=200, lr=1e-3)
    sample = make_sample(cfg, 0)
    model = MattingModel(toy_model_config(), seed=0)
    pred0 = model.infer(sample.composite, sample.trimap)
    sad0 = compute_metrics(pred0, AlphaMatte(sample.alpha), sample.trimap).sad
    state = train(model, cfg, tmp_path_factory.mktemp("overfit"),
                  sample_pool=[sample], log=None)
    pred1 = model.infer(sample.composite, sample.trimap)
    sad1 = compute_metrics(pred1, AlphaMatte(sample.alpha), sample.trimap).sad
    return {"model": model, "sample": sample, "history": state.history,
            "sad_before": sad0, "sad_after": sad1}


# -- 1: gradient integrity ----------------------------------------------------


def _fd_params(loss_fn, model, coords, h=1e-5):
    """Finite-difference vs analytic gradients at chosen (param, indices)."""
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p, idxs in coords:
        analytic = p.grad.ravel()
        flat = p.data.ravel()
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                hi = loss_fn().item()
            flat[i] = orig - h
            with no_grad():
                lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = analytic[i]
            worst = max(worst,
                        abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


def test_gradient_integrity():
    rng = np.random.default_rng(0)
    worst = 0.0
    with use_dtype(np.float64):
        # individual layers, gradient w.r.t. the input
        lin = Linear(5, 4, rng, dtype=np.float64)
        worst = max(worst, finite_diff_check(
            lambda x: T.tsum(T.mul(lin(x), lin(x))),
            Tensor(rng.standard_normal((3, 5)))))
        ln = LayerNorm(6, dtype=np.float64)
        ln_probe = Tensor(rng.standard_normal(6))
        worst = max(worst, finite_diff_check(
            lambda x: T.tsum(T.mul(ln(x), ln_probe)),
            Tensor(rng.standard_normal((2, 6)))))
        gn = GroupNorm(4, groups=2, dtype=np.float64)
        worst = max(worst, finite_diff_check(
            lambda x: T.tsum(T.mul(gn(x), gn(x))),
            Tensor(rng.standard_normal((4, 3, 3)))))
        mlp = Mlp(4, rng, dtype=np.float64)
        worst = max(worst, finite_diff_check(
            lambda x: T.tsum(T.mul(mlp(x), mlp(x))),
            Tensor(rng.standard_normal((3, 4)))))
        cnr = ConvNormRelu(2, 4, rng, groups=2, dtype=np.float64)
        worst = max(worst, finite_diff_check(
            lambda x: T.tsum(T.mul(cnr(x), cnr(x))),
            Tensor(rng.standard_normal((2, 4, 4)))))
        attn = WindowAttention(8, 2, 2, 3, rng, dtype=np.float64)
        priors = Tensor(rng.standard_normal((3, 8)))
        mask = shift_attention_mask(4, 4, 2, 1)
        worst = max(worst, finite_diff_check(
            lambda x: T.tsum(T.mul(attn.pa_wsa(x, priors, mask, 2)[0],
                                   attn.pa_wsa(x, priors, mask, 2)[0])),
            Tensor(rng.standard_normal((4, 4, 8))), indices=range(0, 128, 7)))
        layer_worst = worst

        # one full prior-attentive block (memory mode)
        block = PastBlock(8, 2, 4, shifted=True, n_prior=6,
                          rng=rng, dtype=np.float64)
        regions = RegionMap(rng.integers(0, 3, size=(8, 8)).astype(np.uint8))
        seed_triple = Tensor(rng.standard_normal((3, 8)))

        def block_loss(x):
            mem = PriorMemory(0)
            mem.append(seed_triple)
            y = block.forward(x, regions, mem, PriorMode.UK_FG_BG_MEMORY)
            return T.tsum(T.mul(y, y))

        worst = max(worst, finite_diff_check(
            block_loss, Tensor(rng.standard_normal((8, 8, 8))),
            indices=range(0, 512, 29)))

        # end to end: encoder + decoder + progressive fusion + total loss
        cfg = toy_model_config()
        cfg.dtype = "float64"
        model = MattingModel(cfg, seed=0)
        sample = make_sample(toy_train_config(), 0)
        weights = TrainConfig().loss_weights()

        def e2e_loss():
            out = model.forward(sample.composite, sample.trimap)
            return loss_total(out["fused"], sample, weights)

        probes = [
            model.encoder.patch_embed.weight_rgb,
            model.encoder.stages[0][0].attn.qkv.weight,
            model.encoder.stages[2][1].attn.bias_table,
            model.encoder.stages[3][0].norm1.gamma,
            model.encoder.merges[0].reduction.weight,
            model.decoder.bottleneck.weight,
            model.decoder.shortcut_img.weight,
            model.decoder.head8.weight,
            model.decoder.head4.bias,
            model.decoder.head1.weight,
        ]
        coord_rng = np.random.default_rng(1)
        coords = [(p, coord_rng.integers(0, p.size, size=3)) for p in probes]
        e2e_worst = _fd_params(e2e_loss, model, coords)
        worst = max(worst, e2e_worst)

    verdict("gradient integrity",
            worst < 1e-5,
            f"max rel err {worst:.2e} (layers {layer_worst:.2e}, "
            f"end-to-end {e2e_worst:.2e}), tolerance 1e-5")


# -- 2: prior-token oracle ----------------------------------------------------


def test_prior_token_loop_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    empty_cases = 0
    for case in range(100):
        rows, cols = rng.integers(2, 7, size=2)
        d = int(rng.integers(2, 9))
        tokens = rng.standard_normal((rows * cols, d))
        # every third case drops one or two classes to force empty regions
        pool = [0, 1, 2] if case % 3 else rng.choice(3, size=rng.integers(1, 3),
                                                     replace=False).tolist()
        labels = rng.choice(pool, size=(rows, cols)).astype(np.uint8)
        uk, fg, bg = compute_prior_tokens(Tensor(tokens),
                                          RegionMap(labels))
        flat = labels.ravel()
        for got, q in ((uk, 1), (fg, 2), (bg, 0)):
            members = [tokens[i] for i in range(flat.size) if flat[i] == q]
            if members:
                acc = np.zeros(d)
                for m in members:
                    acc += m
                expect = acc / len(members)
            else:
                expect = np.zeros(d)
                empty_cases += 1
            worst = max(worst, float(np.abs(got.data - expect).max()))
    verdict("prior-token loop-mean oracle",
            worst < 1e-6 and empty_cases > 0,
            f"100 cases, max abs err {worst:.2e}, "
            f"{empty_cases} empty-region tokens")


# -- 3: memory schedule -------------------------------------------------------


def test_memory_schedule():
    cfg = EncoderConfig(embed_dim=8, depths=(2, 2, 6, 2), heads=(2, 2, 2, 2),
                        window=4, prior_mode=PriorMode.UK_FG_BG_MEMORY)
    rng = np.random.default_rng(3)
    enc = Encoder(cfg, rng)
    trimap = Trimap(rng.integers(0, 3, size=(64, 64)).astype(np.uint8))
    cap = []
    enc.forward(Tensor(rng.standard_normal((6, 64, 64)).astype(np.float32)),
                trimap, capture=cap)
    ok = True
    for rec in cap:
        b = rec["block"]
        m = rec["window"]
        n_p = len(rec["classes"])
        expect = 3 * (b + 1)
        if n_p != expect or rec["attn"].shape[-1] != m * m + expect:
            ok = False
    stage3_final = [r for r in cap if r["stage"] == 2 and r["block"] == 5]
    ok = ok and len(stage3_final) == 1 \
        and len(stage3_final[0]["classes"]) == 18
    verdict("prior-memory schedule",
            ok,
            "N_p = 3*(b+1) at every block of depths (2,2,6,2); "
            "deep-stage final block consumes 18 prior tokens")


# -- 4: degenerate equivalence ------------------------------------------------


def _plain_swin_block(block, x):
    """Reference shifted-window transformer block without prior machinery,
    built from the same primitives in the same order with shared weights."""
    h, w, d = x.shape
    m = min(block.window, h, w)
    do_shift = block.shifted and (h > m or w > m)
    offset = m // 2 if do_shift else 0
    shortcut = x
    xn = block.norm1(x)
    xs = cyclic_shift(xn, offset) if do_shift else xn
    mask = shift_attention_mask(h, w, m, offset)
    windows = window_partition(xs, m)

    attn = block.attn
    n_win, t, _ = windows.shape
    q, k, v = attn._split_heads(attn.qkv(windows), t)
    from priormatte.attention import build_bias
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), attn.scale)
    scores = T.add(scores, build_bias(attn.bias_table, m, 0, attn.window))
    scores = T.add(scores, mask[:, None])
    weights = T.softmax_last_dim(scores)
    out = T.matmul(weights, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n_win, t, d))
    wout = attn.proj(out)

    y = window_reverse(wout, m, h, w)
    if do_shift:
        y = cyclic_shift(y, -offset)
    x = T.add(shortcut, y)
    return T.add(x, block.mlp(block.norm2(x)))


def test_prior_free_mode_equals_plain_window_block():
    rng = np.random.default_rng(4)
    mismatches = 0
    for case in range(20):
        block = PastBlock(8, 2, 4, shifted=bool(case % 2), n_prior=0,
                          rng=np.random.default_rng(100 + case))
        x = Tensor(rng.standard_normal((8, 8, 8)).astype(np.float32))
        regions = RegionMap(rng.integers(0, 3, size=(8, 8)).astype(np.uint8))
        got = block.forward(x, regions, PriorMemory(0), PriorMode.NONE)
        ref = _plain_swin_block(block, x)
        if not np.array_equal(got.data, ref.data):
            mismatches += 1
    verdict("prior-free degenerate equivalence",
            mismatches == 0,
            "20 random inputs bit-identical to the plain "
            "shifted-window block with shared weights")


# -- 5 and 6: bias-table structure and parameter budget ----------------------


@pytest.fixture(scope="module")
def tiny_encoder_counts():
    counts = {}
    for mode in ("none", "gap", "uk", "uk_fg_bg", "uk_fg_bg_memory"):
        cfg = tiny_model_config(mode)
        enc = Encoder(cfg.encoder_config(), np.random.default_rng(0))
        counts[mode] = enc.num_params()
        del enc
    return counts


def test_bias_table_structure(tiny_encoder_counts):
    cfg = toy_model_config()
    model = MattingModel(cfg, seed=0)
    ok = True
    for s, blocks in enumerate(model.encoder.stages):
        for b, block in enumerate(blocks):
            n_p = n_prior_for(PriorMode.UK_FG_BG_MEMORY, b)
            expect = (cfg.heads[s], (2 * cfg.window - 1) ** 2 + n_p)
            if block.attn.bias_table.shape != expect:
                ok = False

    # parameter deltas across prior modes equal the symbolic slot count
    base, _ = count_params(MattingModel(toy_model_config("none")))
    toy_ok = True
    for mode in ("uk", "uk_fg_bg", "uk_fg_bg_memory"):
        mcfg = toy_model_config(mode)
        total, _ = count_params(MattingModel(mcfg))
        if total - base != bias_slot_count(mcfg):
            toy_ok = False
    tiny_delta = tiny_encoder_counts["uk_fg_bg"] - tiny_encoder_counts["none"]
    tiny_ok = tiny_delta == bias_slot_count(tiny_model_config("uk_fg_bg"))
    verdict("bias-table structure",
            ok and toy_ok and tiny_ok,
            f"per-head length (2M-1)^2+N_p at every block; "
            f"full-size prior-slot delta {tiny_delta} matches symbolic count")


def test_parameter_budget(tiny_encoder_counts):
    model = MattingModel(tiny_model_config("uk_fg_bg_memory"), seed=0)
    total, breakdown = count_params(model)
    del model
    target = 44_800_000
    within = abs(total - target) / target
    budget_ok = within <= 0.10

    stripped = {m: c - bias_slot_count(tiny_model_config(m))
                for m, c in tiny_encoder_counts.items()}
    values = list(stripped.values())
    stable_ok = all(v == values[0] for v in values)
    spread = (max(tiny_encoder_counts.values())
              - min(tiny_encoder_counts.values())) / values[0]
    verdict("parameter budget",
            budget_ok and stable_ok and spread < 0.01,
            f"full model {total:,} ({within * 100:.1f}% from 44.8M target; "
            f"encoder {breakdown['encoder']:,}, decoder "
            f"{breakdown['decoder']:,}); encoder counts across prior modes "
            f"identical once bias slots are removed")


# -- 7: progressive-fusion invariants ----------------------------------------


def test_progressive_fusion_invariants():
    rng = np.random.default_rng(7)
    checked = confident = 0
    ok = True
    for case in range(1000):
        n = int(rng.choice([1, 2, 4]))
        maps = []
        for size in (n, 2 * n, 8 * n):
            vals = rng.random((1, size, size))
            snap = rng.random((1, size, size)) < 0.3
            vals[snap] = np.round(vals[snap])
            maps.append(vals)
        triple = AlphaTriple(os8=Tensor(maps[0]), os4=Tensor(maps[1]),
                             os1=Tensor(maps[2]))
        final, fused = prm_fuse(triple)
        raws = [T.upsample_bilinear(triple.os4, 4).data, triple.os1.data]
        prev = fused[0].data
        for raw, cur_t in zip(raws, fused[1:]):
            cur = cur_t.data
            certain = (prev <= 0.0) | (prev >= 1.0)
            # confidence preservation: certain pixels pass through bitwise
            if not np.array_equal(cur[certain], prev[certain]):
                ok = False
            # binary gate: every other pixel takes the current raw map
            if not np.array_equal(cur[~certain], raw[~certain]):
                ok = False
            confident += int(certain.sum())
            checked += cur.size
            prev = cur
        if final is not fused[-1]:
            ok = False
    verdict("progressive-fusion invariants",
            ok and confident > 0,
            f"1000 random triples, {checked} fused pixels, "
            f"{confident} confident pixels preserved bit-exactly")


# -- 8: overfit ---------------------------------------------------------------


def test_overfit_single_sample(overfit_run):
    h = overfit_run["history"]
    drop = 1.0 - h[-1] / h[0]
    ratio = overfit_run["sad_after"] / overfit_run["sad_before"]
    verdict("single-sample overfit",
            drop >= 0.90 and ratio < 0.10,
            f"200 steps: loss {h[0]:.3f} -> {h[-1]:.3f} "
            f"({drop * 100:.1f}% drop, need >= 90%); unknown-region SAD "
            f"{overfit_run['sad_before']:.3f} -> "
            f"{overfit_run['sad_after']:.3f} "
            f"({ratio * 100:.1f}% of untrained, need < 10%)")


# -- 9: prior-mode trend (soft) ----------------------------------------------


def test_prior_mode_trend_report():
    modes = ["uk_fg_bg_memory", "uk_fg_bg", "uk", "none"]
    seeds = [0, 1, 2]
    steps = 500
    cfg = toy_train_config(steps=steps, lr=1e-3)
    pool = [make_sample(cfg, 100 + i) for i in range(8)]
    eval_samples = [make_sample(cfg, 9000 + i) for i in range(4)]

    results = {}
    for mode in modes:
        per_seed = []
        for seed in seeds:
            model = MattingModel(toy_model_config(mode), seed=seed)
            run_cfg = toy_train_config(steps=steps, lr=1e-3, seed=seed)
            train(model, run_cfg, os.path.join(RUNS_DIR, "trend",
                                               f"{mode}-s{seed}"),
                  sample_pool=pool, log=None)
            per_seed.append(mean_eval_sad(model, eval_samples))
            del model
        results[mode] = per_seed

    means = {m: float(np.mean(v)) for m, v in results.items()}
    ordering_ok = (means["uk_fg_bg_memory"] <= means["uk_fg_bg"]
                   <= means["uk"] <= means["none"])

    os.makedirs(RUNS_DIR, exist_ok=True)
    report_path = os.path.join(RUNS_DIR, "trend_report.csv")
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode"] + [f"seed{s}" for s in seeds]
                        + ["mean_sad"])
        for mode in modes:
            writer.writerow([mode] + [f"{v:.6f}" for v in results[mode]]
                            + [f"{means[mode]:.6f}"])
        writer.writerow(["ordering_memory<=triple<=uk<=none",
                         "held" if ordering_ok else "VIOLATED"])

    summary = ", ".join(f"{m}={means[m]:.4f}" for m in modes)
    status = "ordering held" if ordering_ok else \
        "ordering VIOLATED (soft check: flagged in report, not a failure)"
    verdict("prior-mode trend (soft)",
            os.path.exists(report_path),
            f"mean eval SAD over 3 seeds x {steps} steps: {summary}; "
            f"{status}; report at {os.path.relpath(report_path)}")


# -- 10: metric suite ---------------------------------------------------------


def test_metric_suite_matches_oracle():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        pred = rng.random((64, 64))
        gt = np.clip(pred + rng.normal(0, 0.25, size=(64, 64)), 0, 1)
        labels = rng.integers(0, 3, size=(64, 64)).astype(np.uint8)
        rep = compute_metrics(AlphaMatte(pred), AlphaMatte(gt),
                              Trimap(labels))
        expect = metric_oracle(pred, gt, labels)
        worst = max(worst, float(np.abs(np.array(rep.as_row())
                                        - np.array(expect)).max()))

    same = AlphaMatte(rng.random((64, 64)))
    zero_rep = compute_metrics(
        same, same, Trimap(rng.integers(0, 3, size=(64, 64)).astype(np.uint8)))
    zeros_ok = zero_rep.as_row() == [0.0, 0.0, 0.0, 0.0]
    verdict("metric suite vs reference oracle",
            worst < 1e-6 and zeros_ok,
            f"20 random 64x64 cases, max abs deviation {worst:.2e}; "
            f"identical inputs score exactly zero")


# -- 11: attention diagnostics ------------------------------------------------


def test_attention_mass_after_overfit(overfit_run):
    model = overfit_run["model"]
    sample = overfit_run["sample"]
    records = []
    model.forward(sample.composite, sample.trimap, capture=records)
    report = capture_records_to_report(records)
    ok = True
    n_blocks = 0
    for row in report.rows:
        prior_mass = row["uk"] + row["fg"] + row["bg"]
        total = row["spatial"] + prior_mass
        if not (0.0 < prior_mass < 1.0):
            ok = False
        if abs(total - 1.0) > 1e-4:
            ok = False
        n_blocks += 1
    verdict("attention mass diagnostics",
            ok and n_blocks > 0,
            f"{n_blocks} (block, head) rows after overfit: prior mass "
            f"strictly inside (0,1), spatial+prior mass sums to 1")
