"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The ablation and feature-quality criteria (7 and 8) share one set of
five seeded benchmark runs (100 identities x 8 images, 64 dims, a quarter
of each identity's items shifted halfway toward a foreign center). The
full ablation table is printed for inspection regardless of outcome.
"""
from __future__ import annotations

import csv
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import finite_difference_grads, relative_grad_error
from sggnn.cli import main as cli_main
from sggnn.corpus import SynthConfig, generate_synthetic, split_corpus
from sggnn.evaluation import (
    EvalConfig,
    average_precision,
    evaluate,
    random_walk_refine,
)
from sggnn.graph import FusionConfig, edge_weights_sg, fuse
from sggnn.params import ModelParams
from sggnn.trainer import (
    BatchSampler,
    SamplerConfig,
    TrainSchedule,
    base_loss_and_grads,
    sggnn_loss_and_grads,
    stage1_train,
    stage2_train,
)

BENCHMARK_SEEDS = (1, 2, 3, 4, 5)
BENCHMARK_SCHEDULE = TrainSchedule(
    stage1_lr=0.01,
    stage1_epochs_before_decay=15,
    stage1_epochs_after=10,
    stage2_lr=1e-3,
    stage2_epochs=20,
    alpha=0.9,
    lambda_gg=1.0,
)


def benchmark_synth(seed: int) -> SynthConfig:
    return SynthConfig(
        num_identities=100, images_per_identity=8, dim=64, center_scale=1.0,
        noise_sigma=0.8, hard_fraction=0.25, hard_shift=0.5, seed=seed,
    )


def announce(capsys, criterion: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'} — {detail}")


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


def test_criterion_1_gradient_correctness(capsys, tiny_params, tiny_batch):
    start = time.monotonic()
    losses = {
        "stage1": lambda p: base_loss_and_grads(p, tiny_batch)[0],
        "stage2_sg_t1": lambda p: sggnn_loss_and_grads(
            p, tiny_batch, FusionConfig(alpha=0.9, iterations=1), lambda_gg=1.0
        )[0],
        "stage2_compat_t2": lambda p: sggnn_loss_and_grads(
            p, tiny_batch, FusionConfig(alpha=0.9, iterations=2, weight_mode="compatibility"),
            lambda_gg=1.0,
        )[0],
    }
    analytic = {
        "stage1": base_loss_and_grads(tiny_params.copy(), tiny_batch)[1],
        "stage2_sg_t1": sggnn_loss_and_grads(
            tiny_params.copy(), tiny_batch, FusionConfig(alpha=0.9, iterations=1), lambda_gg=1.0
        )[1],
        "stage2_compat_t2": sggnn_loss_and_grads(
            tiny_params.copy(), tiny_batch,
            FusionConfig(alpha=0.9, iterations=2, weight_mode="compatibility"), lambda_gg=1.0,
        )[1],
    }
    worst = 0.0
    failures = []
    for tag, loss_fn in losses.items():
        fd = finite_difference_grads(loss_fn, tiny_params, h=1e-5)
        for name, grad in analytic[tag].items():
            err = relative_grad_error(grad, fd[name])
            worst = max(worst, err)
            if err >= 1e-4:
                failures.append((tag, name, err))
    elapsed = time.monotonic() - start
    ok = not failures and elapsed < 60.0
    announce(capsys, 1, ok, f"max relative error {worst:.2e}, {elapsed:.1f}s")
    assert not failures, failures
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# criterion 2: edge-weight contract


def test_criterion_2_edge_weight_contract(capsys):
    rng = np.random.default_rng(1001)
    worst_sum = worst_shift = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        s = rng.standard_normal((n, n)) * rng.uniform(0.5, 20.0)
        w = edge_weights_sg(s)
        assert np.all(np.diag(w) == 0.0)
        assert np.all(w >= 0.0)
        worst_sum = max(worst_sum, float(np.abs(w.sum(axis=1) - 1.0).max()))
        shifted = edge_weights_sg(s + rng.standard_normal((n, 1)))
        worst_shift = max(worst_shift, float(np.abs(shifted - w).max()))
    ok = worst_sum < 1e-9 and worst_shift < 1e-9
    announce(capsys, 2, ok, f"row-sum dev {worst_sum:.1e}, shift dev {worst_shift:.1e} over 1000 matrices")
    assert ok


# ---------------------------------------------------------------------------
# criterion 3: alpha = 0 collapse


def test_criterion_3_alpha_zero_collapse(capsys):
    corpus = generate_synthetic(benchmark_synth(1))
    _, test_corpus = split_corpus(corpus, 0.5, 2)
    params = ModelParams.init(d_raw=64, d_feat=64, seed=3)
    cfg = EvalConfig(shortlist_size=100, fusion=FusionConfig(alpha=0.0))
    base = evaluate(params, test_corpus, "base", cfg)
    collapsed = evaluate(params, test_corpus, "sggnn", cfg)
    ok = base == collapsed
    announce(capsys, 3, ok, f"base == sggnn(alpha=0) metrics: mAP {base.mAP:.6f}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 4: fusion iteration consistency and convergence


def test_criterion_4_fusion_consistency_and_convergence(capsys):
    rng = np.random.default_rng(44)
    n, d = 8, 6
    feats = rng.standard_normal((n, d))
    msgs = rng.standard_normal((n, d))
    w = edge_weights_sg(rng.standard_normal((n, n)))
    alpha = 0.9
    direct = (1.0 - alpha) * feats + alpha * (w @ msgs)
    iterative = fuse(feats, msgs, w, FusionConfig(alpha=alpha, iterations=1))
    bitwise = np.array_equal(direct, iterative)

    cur = feats
    converged_at = None
    for k in range(1, 201):
        nxt = fuse(cur, msgs, w, FusionConfig(alpha=alpha, iterations=1))
        if np.linalg.norm(nxt - cur) < 1e-8:
            converged_at = k
            break
        cur = nxt
    ok = bitwise and converged_at is not None
    announce(capsys, 4, ok, f"single step bit-identical: {bitwise}; frozen-message iterates "
                            f"converged at step {converged_at}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 5: random-walk closed form vs fixed point


def test_criterion_5_random_walk_closed_form(capsys):
    rng = np.random.default_rng(55)
    alpha = 0.9
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        s = rng.standard_normal(n) * rng.uniform(0.5, 5.0)
        w = edge_weights_sg(rng.standard_normal((n, n)) * 2.0)
        closed = random_walk_refine(s, w, alpha)
        cur = s.copy()
        for _ in range(2000):
            nxt = (1.0 - alpha) * s + alpha * (w @ cur)
            if np.max(np.abs(nxt - cur)) < 1e-14:
                cur = nxt
                break
            cur = nxt
        worst = max(worst, float(np.max(np.abs(closed - cur))))
    ok = worst < 1e-8
    announce(capsys, 5, ok, f"max |closed-form - fixed-point| = {worst:.1e} over 100 shortlists")
    assert ok


# ---------------------------------------------------------------------------
# criterion 6: metric oracle


def oracle_ap(rel: list[int]) -> float:
    """Brute-force average precision, written independently of the library."""
    total = 0.0
    n_rel = 0
    for k in range(1, len(rel) + 1):
        if rel[k - 1]:
            n_rel += 1
            total += sum(rel[:k]) / k
    return total / n_rel


def oracle_first_rank(rel: list[int]) -> int:
    for k, r in enumerate(rel, start=1):
        if r:
            return k
    raise ValueError("no relevant item")


def test_criterion_6_metric_oracle(capsys):
    rng = np.random.default_rng(66)
    patterns: list[list[int]] = [
        [1, 0, 1],
        [1],
        [0, 1],
        [1, 1, 1],
        [0, 0, 1],
        [1, 0, 0, 1, 0, 1],
        [0, 1, 1, 0, 0, 0, 1],
    ]
    while len(patterns) < 25:
        n = int(rng.integers(1, 30))
        pat = rng.integers(0, 2, size=n).tolist()
        if sum(pat) > 0:
            patterns.append(pat)

    assert average_precision([1, 0, 1]) == pytest.approx(5.0 / 6.0, abs=1e-12)
    mismatches = 0
    ranks_lib, ranks_oracle = [], []
    for pat in patterns:
        if average_precision(pat) != oracle_ap(pat):
            mismatches += 1
        ranks_lib.append(int(np.argmax(np.asarray(pat, dtype=bool))) + 1)
        ranks_oracle.append(oracle_first_rank(pat))
    cmc_lib = {k: float((np.array(ranks_lib) <= k).mean()) for k in (1, 5, 10)}
    cmc_oracle = {k: sum(r <= k for r in ranks_oracle) / len(ranks_oracle) for k in (1, 5, 10)}
    ok = mismatches == 0 and cmc_lib == cmc_oracle
    announce(capsys, 6, ok, f"{len(patterns)} patterns, {mismatches} AP mismatches, CMC equal: "
                            f"{cmc_lib == cmc_oracle}")
    assert ok


# ---------------------------------------------------------------------------
# criteria 7 and 8: benchmark ablation and feature quality


@pytest.fixture(scope="session")
def benchmark_runs():
    """Train and evaluate all ablation variants for the five benchmark seeds."""
    runs = []
    for seed in BENCHMARK_SEEDS:
        corpus = generate_synthetic(benchmark_synth(seed))
        train_corpus, test_corpus = split_corpus(corpus, 0.5, seed + 1)
        sampler = BatchSampler(train_corpus, SamplerConfig(k=4, m=8, seed=seed + 3))

        stage1 = ModelParams.init(d_raw=64, d_feat=64, seed=seed + 2)
        stage1, _ = stage1_train(stage1, train_corpus, BENCHMARK_SCHEDULE, sampler)

        sg = stage1.copy()
        sg, _ = stage2_train(sg, train_corpus, BENCHMARK_SCHEDULE, sampler,
                             FusionConfig(alpha=0.9))

        wo = stage1.copy()
        wo, _ = stage2_train(
            wo, train_corpus, replace(BENCHMARK_SCHEDULE, lambda_gg=0.0), sampler,
            FusionConfig(alpha=0.9, weight_mode="compatibility"),
        )

        cfg = EvalConfig(shortlist_size=100, fusion=FusionConfig(alpha=0.9))
        runs.append(
            {
                "seed": seed,
                "base": evaluate(stage1, test_corpus, "base", cfg).mAP,
                "random_walk": evaluate(stage1, test_corpus, "random_walk", cfg).mAP,
                "sggnn": evaluate(sg, test_corpus, "sggnn", cfg).mAP,
                "sggnn_wo_sg": evaluate(wo, test_corpus, "sggnn_wo_sg", cfg).mAP,
                "l2_stage1": evaluate(stage1, test_corpus, "l2", cfg).mAP,
                "l2_stage2": evaluate(sg, test_corpus, "l2", cfg).mAP,
            }
        )
    return runs


def test_criterion_7_ablation_ordering(capsys, benchmark_runs):
    mean = {
        key: float(np.mean([r[key] for r in benchmark_runs]))
        for key in ("base", "random_walk", "sggnn", "sggnn_wo_sg")
    }
    margins = [r["sggnn"] - r["base"] for r in benchmark_runs]
    n_margin = sum(m >= 0.01 for m in margins)
    ordering = mean["base"] <= mean["random_walk"] <= mean["sggnn"]
    wo_below = mean["sggnn_wo_sg"] <= mean["sggnn"]
    ok = ordering and wo_below and n_margin >= 4

    with capsys.disabled():
        print("\n  ablation table (mAP per seed):")
        print("  seed      base  random_walk  sggnn_wo_sg     sggnn    margin")
        for r, m in zip(benchmark_runs, margins):
            print(f"  {r['seed']:4d}  {r['base']:8.4f}  {r['random_walk']:11.4f}"
                  f"  {r['sggnn_wo_sg']:11.4f}  {r['sggnn']:8.4f}  {m:+8.4f}")
        print(f"  mean  {mean['base']:8.4f}  {mean['random_walk']:11.4f}"
              f"  {mean['sggnn_wo_sg']:11.4f}  {mean['sggnn']:8.4f}")
    announce(capsys, 7, ok,
             f"base<=rw<=sggnn: {ordering}, wo_sg<=sggnn: {wo_below}, "
             f"margin>=1pt in {n_margin}/5 seeds")
    assert ordering and wo_below
    assert n_margin >= 4


def test_criterion_8_feature_quality_gain(capsys, benchmark_runs):
    wins = sum(r["l2_stage2"] >= r["l2_stage1"] for r in benchmark_runs)
    deltas = [r["l2_stage2"] - r["l2_stage1"] for r in benchmark_runs]
    ok = wins >= 3
    announce(capsys, 8, ok,
             f"stage-2 l2 features >= stage-1 in {wins}/5 seeds "
             f"(mean gain {np.mean(deltas):+.4f} mAP)")
    assert ok


# ---------------------------------------------------------------------------
# criteria 9 and 10: CLI determinism and sensitivity sweep


DESK_CONFIG = """
corpus.num_identities = 12
corpus.images_per_identity = 4
corpus.dim = 8
corpus.noise_sigma = 0.5
corpus.seed = 7
split.train_fraction = 0.5
split.seed = 11
model.feat_dim = 8
model.seed = 3
sampler.k = 2
sampler.m = 3
sampler.seed = 5
train.stage1_lr = 0.01
train.stage1_epochs_before_decay = 4
train.stage1_epochs_after = 2
train.stage2_lr = 0.001
train.stage2_epochs = 4
fusion.alpha = 0.9
eval.shortlist_size = 10
eval.methods = base,sggnn,random_walk
"""


def _full_cli_run(root: Path) -> dict[str, Path]:
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "exp.cfg"
    cfg_path.write_text(DESK_CONFIG + f"output.dir = {root / 'out'}\n")
    corpus = root / "corpus.txt"
    report = root / "report.csv"
    assert cli_main(["gen", "--config", str(cfg_path), "--corpus", str(corpus)]) == 0
    assert cli_main(["train", "--config", str(cfg_path), "--corpus", str(corpus)]) == 0
    assert cli_main([
        "eval", "--config", str(cfg_path), "--corpus", str(corpus),
        "--checkpoint", str(root / "out" / "stage2.ckpt"), "--report", str(report),
    ]) == 0
    return {
        "corpus": corpus,
        "stage1": root / "out" / "stage1.ckpt",
        "stage2": root / "out" / "stage2.ckpt",
        "train_log": root / "out" / "train_log.csv",
        "report": report,
        "report_txt": report.with_suffix(".csv.txt"),
        "report_png": report.with_suffix(".csv.png"),
    }


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("determinism")
    return _full_cli_run(base / "run_a"), _full_cli_run(base / "run_b")


def test_criterion_9_end_to_end_determinism(capsys, cli_runs):
    run_a, run_b = cli_runs
    diffs = [
        name for name in run_a
        if run_a[name].read_bytes() != run_b[name].read_bytes()
    ]
    ok = not diffs
    announce(capsys, 9, ok,
             f"gen->train->eval reruns byte-identical across {len(run_a)} artifacts"
             + ("" if ok else f"; differing: {diffs}"))
    assert ok, diffs


def test_criterion_10_sensitivity_sweep(capsys, cli_runs, tmp_path):
    run_a, _ = cli_runs
    cfg_path = tmp_path / "sweep.cfg"
    cfg_path.write_text(
        DESK_CONFIG
        + f"output.dir = {tmp_path / 'out'}\n"
        + "sweep.shortlists = 25,50,100\nsweep.alphas = 0.5,0.9,0.95\nsweep.iterations = 1,2\n"
    )
    report = tmp_path / "sweep.csv"
    code = cli_main([
        "sweep", "--config", str(cfg_path), "--corpus", str(run_a["corpus"]),
        "--checkpoint", str(run_a["stage2"]), "--report", str(report),
    ])
    rows = list(csv.DictReader(report.open()))
    in_range = all(
        0.0 <= float(r["mAP"]) <= 1.0 and 0.0 <= float(r["top1"]) <= 1.0 for r in rows
    )
    ok = code == 0 and len(rows) == 18 and in_range
    by_alpha = {}
    for r in rows:
        by_alpha.setdefault(r["alpha"], []).append(float(r["mAP"]))
    trend = ", ".join(f"alpha={a}: mean mAP {np.mean(v):.4f}" for a, v in sorted(by_alpha.items()))
    announce(capsys, 10, ok, f"18-row sweep complete, all cells in [0, 1]; {trend}")
    assert ok
