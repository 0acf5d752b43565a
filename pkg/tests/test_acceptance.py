"""Acceptance criteria 1-8, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n>: PASS|FAIL`` line (repeated in the
terminal summary) and then asserts.
"""
import json
import math
import time

import numpy as np
import pytest
from PIL import Image

import attention_oracles as oracle
from ffa_oracles import algorithm_loop

from cmt import tensor as T
from cmt.attention import (
    AttentionConfig,
    init_mhsa_weights,
    init_mmsa_weights,
    measure_cost,
    mhsa_analytic_cost,
    mhsa_forward,
    mmsa_analytic_cost,
    mmsa_forward,
    mmsa_level1,
)
from cmt.cli import main
from cmt.ffa import FfaConfig, build_masks, fuse
from cmt.gradcheck import gradcheck, gradcheck_named
from cmt.metrics import confusion, report
from cmt.model import check_input_size, cmt_logits, init_params, toy_config
from cmt.storage import read_jsonl
from cmt.tensor import Tensor
from cmt.training import (
    TrainConfig,
    bce_loss,
    evaluate_dataset,
    lr_at,
    make_toy_dataset,
    toy_train_config,
    train_loop,
)

GRAD_TOL = 1e-4


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- 1


def _op_cases():
    r = _rng(1)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    img = r.normal(size=(2, 2, 6, 6))
    kern = r.normal(size=(3, 2, 3, 3))
    tok = r.normal(size=(2, 5, 4))
    gamma, beta = r.normal(size=4), r.normal(size=4)
    att = AttentionConfig(channels=2, heads=2, g=2, g_prime=2)
    mh = {k: v.data for k, v in init_mhsa_weights(2, r).items()}
    mm = {k: v.data for k, v in init_mmsa_weights(2, r).items()}
    x_att = r.normal(size=(2, 4, 4))
    w_out = r.normal(size=(2, 4, 4))
    target = r.integers(0, 2, size=(3, 4))

    def weighted(fn):
        # contract the op output with fixed weights so every output entry matters
        def f(*ts):
            out = fn(*ts)
            return T.sum_(T.mul(out, _rng(99).normal(size=out.shape)))
        return f

    cases = {
        "add": (weighted(T.add), [a, b]),
        "sub": (weighted(T.sub), [a, b]),
        "mul": (weighted(T.mul), [a, b]),
        "mul_broadcast": (weighted(T.mul), [a, r.normal(size=(1, 4))]),
        "scale": (weighted(lambda x: T.scale(x, -1.7)), [a]),
        "exp": (weighted(T.exp), [a]),
        "log": (weighted(T.log), [pos]),
        "clip": (weighted(lambda x: T.clip(x, -0.5, 0.5)), [a]),
        "sigmoid": (weighted(T.sigmoid), [a]),
        "relu": (weighted(T.relu), [a]),
        "dropout": (weighted(lambda x: T.dropout(x, 0.3, _rng(5))), [a]),
        "sum": (weighted(lambda x: T.sum_(x, axis=1)), [a]),
        "mean": (weighted(lambda x: T.mean(x, axis=0)), [a]),
        "global_avg_pool": (weighted(T.global_avg_pool), [img]),
        "softmax": (weighted(lambda x: T.softmax(x, axis=-1)), [a]),
        "layer_norm": (weighted(T.layer_norm), [tok, gamma, beta]),
        "matmul": (weighted(T.matmul), [a, b.T]),
        "matmul_batched": (weighted(T.matmul), [tok, r.normal(size=(2, 4, 3))]),
        "conv2d": (weighted(lambda x, k: T.conv2d(x, k, stride=2, padding=1)), [img, kern]),
        "maxpool": (weighted(lambda x: T.pool2d(x, 2, 2, "max")), [img]),
        "avgpool": (weighted(lambda x: T.pool2d(x, 3, 1, "average")), [img]),
        "reshape": (weighted(lambda x: T.reshape(x, (4, 3))), [a]),
        "permute": (weighted(lambda x: T.permute(x, (1, 0))), [a]),
        "nearest_upsample": (weighted(lambda x: T.nearest_upsample(x, 2)), [img]),
        "bce": (lambda o: bce_loss(o, target), [r.uniform(0.05, 0.95, size=(3, 4))]),
        "mhsa": (lambda x, *w: T.sum_(T.mul(mhsa_forward(x, dict(zip(mh, w)), att), w_out)),
                 [x_att, *mh.values()]),
        "mmsa": (lambda x, *w: T.sum_(T.mul(mmsa_forward(x, dict(zip(mm, w)), att), w_out)),
                 [x_att, *mm.values()]),
    }
    return cases


def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    worst = {name: max(gradcheck(fn, arrays)) for name, (fn, arrays) in _op_cases().items()}

    cfg = toy_config()
    assert check_input_size(cfg, 32, 32) == (8, 8, 8)
    assert (cfg.encoders, cfg.attention.g, cfg.attention.g_prime) == (1, 2, 2)
    params = init_params(cfg, 11)
    image = _rng(12).uniform(size=(3, 32, 32))
    weight = _rng(13).normal(size=4)
    e2e = gradcheck_named(lambda p: T.sum_(T.mul(cmt_logits(image, p, cfg), weight)), params)
    worst["toy_cmt_end_to_end"] = max(e2e.values())
    elapsed = time.perf_counter() - start

    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < GRAD_TOL and elapsed < 60
    acceptance(1, ok, f"{len(worst)} checks, worst {name} rel err {err:.2e} (< {GRAD_TOL:g}); "
                      f"{sum(v.size for v in params.values())} toy CMT entries; {elapsed:.1f}s (< 60s)")
    assert ok, worst


# ---------------------------------------------------------------- 2


def _att_setup(c, h, seed):
    r = _rng(seed)
    x = r.normal(size=(c, h, h))
    mh = {k: Tensor(v.data * 3) for k, v in init_mhsa_weights(c, r).items()}
    mm = {k: Tensor(v.data * 3) for k, v in init_mmsa_weights(c, r).items()}
    return x, mh, mm


def test_criterion_2_attention_oracles(acceptance):
    errs = {}
    for c, h in ((2, 4), (2, 8)):
        for heads in (1, 2):
            x, mh, mm = _att_setup(c, h, 10 * h + heads)
            cfg = AttentionConfig(channels=c, heads=heads, g=2, g_prime=2)
            np_mh = {k: v.data for k, v in mh.items()}
            np_mm = {k: v.data for k, v in mm.items()}
            errs[f"mhsa {c}x{h}x{h} heads={heads}"] = np.abs(
                mhsa_forward(x, mh, cfg).data - oracle.mhsa(x, np_mh, heads)).max()
            errs[f"mmsa {c}x{h}x{h} heads={heads}"] = np.abs(
                mmsa_forward(x, mm, cfg).data - oracle.mmsa(x, np_mm, heads, 2, 2, 0.3, 0.7)).max()
        x, _, mm = _att_setup(c, h, 7)
        single = AttentionConfig(channels=c, heads=1, g=h, g_prime=h)
        local = mmsa_level1(x, mm, single).data - x
        dense = {"wq": mm["wq1"], "wk": mm["wk1"], "wv": mm["wv1"], "wp": Tensor(np.eye(c))}
        errs[f"window equivalence {c}x{h}x{h}"] = np.abs(local - (mhsa_forward(x, dense, single).data - x)).max()
    name, err = max(errs.items(), key=lambda kv: kv[1])
    ok = err <= 1e-9
    acceptance(2, ok, f"{len(errs)} comparisons, worst {name} max abs diff {err:.1e} (<= 1e-9)")
    assert ok, errs


# ---------------------------------------------------------------- 3


def test_criterion_3_cost_model(acceptance):
    start = time.perf_counter()
    mhsa_small = mhsa_analytic_cost(2, 4, 4)
    mmsa_small = mmsa_analytic_cost(2, 4, 4, 2, 2)
    cfg = AttentionConfig(channels=64, heads=4, g=2, g_prime=2)
    trials = 21
    mh = measure_cost("mhsa", 64, 24, 24, cfg, trials=trials)
    mm = measure_cost("mmsa", 64, 24, 24, cfg, trials=trials)
    mh2 = measure_cost("mhsa", 64, 24, 24, cfg, trials=2, seed=5)
    mm2 = measure_cost("mmsa", 64, 24, 24, cfg, trials=2, seed=5)
    ratio = mm.wall_ns_median / mh.wall_ns_median
    elapsed = time.perf_counter() - start
    checks = {
        "mhsa cost(2,4,4)=1216": mhsa_small == 1216,
        "mmsa cost(2,4,4,2)=800": mmsa_small == 800,
        "macs deterministic": (mh.measured_macs, mm.measured_macs) == (mh2.measured_macs, mm2.measured_macs),
        "mmsa macs < mhsa macs": mm.measured_macs < mh.measured_macs,
        "wall ratio <= 0.85": ratio <= 0.85,
        "runtime < 120s": elapsed < 120,
    }
    ok = all(checks.values())
    acceptance(3, ok, f"analytic {mhsa_small}/{mmsa_small}; measured MACs mhsa {mh.measured_macs} "
                      f"mmsa {mm.measured_macs}; median wall ratio {ratio:.3f} over {trials} trials; "
                      f"{elapsed:.1f}s; failed: {[k for k, v in checks.items() if not v]}")
    assert ok, checks


# ---------------------------------------------------------------- 4


def test_criterion_4_ffa_suite(acceptance):
    start = time.perf_counter()
    complementary, convex = True, True
    for seed in range(1000):
        r = _rng(seed)
        i1, i2 = r.random((3, 8, 8)), r.random((3, 8, 8))
        mask = build_masks(8, 8, FfaConfig(p=2, alpha=0.4), r)
        complementary &= bool(((mask.m + mask.m_d) == 1.0).all())
        out = fuse(i1, i2, mask)
        convex &= bool((out >= np.minimum(i1, i2)).all() and (out <= np.maximum(i1, i2)).all())
    loop_err = 0.0
    for seed in range(5):
        for m in range(2):
            for n in range(2):
                d = _rng(100 + seed)
                i1, i2 = d.random((8, 8)), d.random((8, 8))
                expected = algorithm_loop(i1, i2, 2, 0.4, m, n, _rng(seed))
                got = fuse(i1, i2, build_masks(8, 8, FfaConfig(p=2, alpha=0.4, m=m, n=n), _rng(seed)))
                loop_err = max(loop_err, float(np.abs(got - expected).max()))
    draws = _rng(2024).beta(0.4, 0.4, size=100_000)
    mean, var = float(draws.mean()), float(draws.var())
    true_var = 1 / (4 * (2 * 0.4 + 1))
    elapsed = time.perf_counter() - start
    checks = {
        "complementarity exact": complementary,
        "convexity 1000 trials": convex,
        "loop oracle <= 1e-12": loop_err <= 1e-12,
        "mean within 0.01": abs(mean - 0.5) <= 0.01,
        "variance within 0.01": abs(var - 0.1389) <= 0.01,
        "runtime < 30s": elapsed < 30,
    }
    ok = all(checks.values())
    acceptance(4, ok, f"loop diff {loop_err:.1e}; Beta(0.4,0.4) mean {mean:.4f} var {var:.4f} "
                      f"(exact {true_var:.4f}); {elapsed:.1f}s; failed: {[k for k, v in checks.items() if not v]}")
    assert ok, checks


# ---------------------------------------------------------------- 5


def test_criterion_5_metrics_oracle(acceptance):
    targets = np.array([[1, 0], [1, 1], [0, 0], [0, 1]])
    preds = np.array([[1, 0], [1, 1], [1, 0], [0, 0]])
    r = report(confusion(preds, targets, 2))
    exact = (r.cp == 5 / 6 and r.cr == 3 / 4 and r.cf1 == 15 / 19
             and r.op == 3 / 4 and r.or_ == 3 / 4 and r.of1 == 3 / 4)
    rng = _rng(0)
    big_t = rng.integers(0, 2, size=(60, 4))
    big_p = rng.integers(0, 2, size=(60, 4))
    base = report(confusion(big_p, big_t, 4))
    invariant = all(report(confusion(big_p[perm], big_t[perm], 4)) == base
                    for perm in (rng.permutation(60) for _ in range(100)))
    ok = exact and invariant
    acceptance(5, ok, f"CP={r.cp!r} CR={r.cr!r} CF1={r.cf1!r} OP={r.op!r} OR={r.or_!r} OF1={r.of1!r}; "
                      f"100 shuffles invariant: {invariant}")
    assert ok


# ---------------------------------------------------------------- 6 and 7


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_train")
    data, held = make_toy_dataset(seed=0), make_toy_dataset(seed=1000)
    cfg = toy_config()
    runs = {}
    for name, ffa in (("off", None), ("off_again", None), ("on", FfaConfig(p=2, alpha=0.4))):
        runs[name] = train_loop(data, init_params(cfg, 0), cfg, toy_train_config(ffa_ratio=1.0), ffa, seed=0,
                                out_dir=out / name)
    return cfg, data, held, runs


def test_criterion_6_training_sanity(acceptance, toy_runs):
    cfg, data, _, runs = toy_runs
    log = runs["off"].log
    hit = next((e["epoch"] + 1 for e in log if e["of1"] >= 0.95), None)
    final = evaluate_dataset(data, runs["off"].params, cfg).of1
    same = runs["off"].checkpoint.read_bytes() == runs["off_again"].checkpoint.read_bytes()
    bce = bce_loss(np.full((16, 4), 0.5), np.eye(4)[np.arange(16) % 4]).item()
    sched = TrainConfig(lr_max=1e-5, lr_min=1e-7, warmup_steps=4, total_steps=80)
    ends = (lr_at(4, sched) == sched.lr_max and lr_at(80, sched) == sched.lr_min
            and lr_at(0, sched) == 0.0
            and lr_at(42, sched) == sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min))
    checks = {
        "OF1 >= 0.95 within 20 epochs": hit is not None and len(log) <= 20,
        "seed-reproducible checkpoint": same,
        "BCE(0.5) = ln 2 within 1e-12": abs(bce - math.log(2)) <= 1e-12,
        "lr endpoints exact": ends,
    }
    ok = all(checks.values())
    acceptance(6, ok, f"train OF1 >= 0.95 first at epoch {hit}, final {final:.3f}; "
                      f"BCE(0.5) - ln2 = {bce - math.log(2):.1e}; failed: {[k for k, v in checks.items() if not v]}")
    assert ok, checks


def test_criterion_7_ffa_ablation_direction(acceptance, toy_runs):
    cfg, _, held, runs = toy_runs
    off = evaluate_dataset(held, runs["off"].params, cfg).of1
    on = evaluate_dataset(held, runs["on"].params, cfg).of1
    ok = on >= off - 0.05
    acceptance(7, ok, f"held-out OF1 with FFA 1:1 {on:.3f} vs without {off:.3f} (drop {off - on:+.3f} <= 0.05)")
    assert ok


# ---------------------------------------------------------------- 8


def _strip(records):
    return [{k: v for k, v in r.items() if k not in ("wall_ms", "wall_ns_median")} for r in records]


def test_criterion_8_cli_determinism(acceptance, tmp_path, capsys):
    rng = _rng(3)
    src = tmp_path / "covid"
    src.mkdir()
    for i in range(6):
        Image.fromarray(rng.integers(0, 256, size=(16, 16), dtype=np.uint8)).save(src / f"x{i}.png")

    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["augment", "--in", str(src), "--count", "8", "--p", "2", "--alpha", "0.4", "--seed", "7",
                     "--out", str(out / "augment")]) == 0
        assert main(["train", "--toy", "--seed", "0", "--epochs", "3", "--out", str(out / "train")]) == 0
        assert main(["bench", "--kind", "both", "--c", "16", "--hw", "8", "--trials", "3", "--seed", "1",
                     "--out", str(out / "bench")]) == 0
    capsys.readouterr()

    a, b = tmp_path / "a", tmp_path / "b"
    byte_files = [f"augment/ffa_{k:05d}.png" for k in range(8)] + [
        "augment/manifest.jsonl", "train/model.cmt", "train/summary.json", "train/config.json"]
    mismatched = [f for f in byte_files if (a / f).read_bytes() != (b / f).read_bytes()]
    for f in ("train/train_log.jsonl", "bench/bench.jsonl"):
        if _strip(read_jsonl(a / f)) != _strip(read_jsonl(b / f)):
            mismatched.append(f)
    ok = not mismatched
    acceptance(8, ok, f"{len(byte_files)} files byte-identical, 2 JSON-lines logs identical with wall-clock "
                      f"fields removed; mismatched: {mismatched}")
    assert ok
