"""Acceptance criteria 1-12.

Each test records a one-line verdict (see ``conftest.py``) before asserting,
so the terminal summary lists every criterion with its measured numbers.
Criteria 3, 4, 5, 7, 8, 11 and 12 read artifacts produced by
``tests/acceptance_lib.py``; if they are missing they are computed here,
which takes hours on one core.
"""
import csv
import json
import time

import numpy as np
import pytest

import acceptance_lib as acc
from donna.blocks import InvertedResidual, build_network, build_reference, count_macs, count_params
from donna.distill import channel_stats, compute_nsa, compute_nsr
from donna.gradcheck import check_gradients
from donna.layers import Conv2d, SqueezeExcite
from donna.predictor import kendall_tau
from donna.search import SearchConfig, cost_ledger, make_cost_model, nsga2_search, random_search_ratio
from donna.snapshot import load_snapshot, save_snapshot
from donna.space import builtin_space, cardinality, enumerate_genomes, sample_uniform
from donna.tensor import Parameter, Tensor, activation, batch_norm, count_multiplies, global_avg_pool, no_grad, softmax_cross_entropy

from test_predictor import fake_library, pair_count_tau
from test_search import TOY


# -- 1 -----------------------------------------------------------------------


def _grad_cases(rng):
    def conv_case(cin, cout, k, stride, groups, bias=False, spatial=5):
        conv = Conv2d(cin, cout, k, stride, groups, bias=bias, rng=rng)
        x = Tensor(rng.standard_normal((2, cin, spatial, spatial)), requires_grad=True)
        probe = None

        def loss():
            nonlocal probe
            y = conv(x)
            if probe is None:
                probe = rng.standard_normal(y.shape)
            return (y * y * probe).sum()

        tensors = {"x": x, "w": conv.weight} | ({"b": conv.bias} if bias else {})
        return loss, tensors

    def act_case(kind):
        x = rng.standard_normal((2, 3, 3, 3))
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05, x)  # keep relu away from its kink
        t = Tensor(x, requires_grad=True)
        c = rng.standard_normal(x.shape)
        return (lambda: (activation(t, kind) * activation(t, kind) * c).sum()), {"x": t}

    def bn_case():
        x = Tensor(rng.standard_normal((4, 3, 3, 3)) * 2 + 1, requires_grad=True)
        g = Parameter(rng.uniform(0.5, 1.5, 3))
        b = Parameter(rng.standard_normal(3))
        c = rng.standard_normal((4, 3, 3, 3))
        rm, rv = np.zeros(3), np.ones(3)
        return (lambda: (batch_norm(x, g, b, rm, rv, True).square() * c).sum()), {"x": x, "gamma": g, "beta": b}

    def se_case():
        se = SqueezeExcite(8, 4, "swish", rng=rng)
        x = Tensor(rng.standard_normal((2, 8, 3, 3)), requires_grad=True)
        c = rng.standard_normal((2, 8, 3, 3))
        return (lambda: (se(x) * c).sum()), dict(se.named_parameters()) | {"x": x}

    def unit_case(act, se, layer_type, stride):
        unit = InvertedResidual(8, 8, 16, stride, 3, act, se, layer_type, rng)
        unit.train()
        x = Tensor(rng.standard_normal((3, 8, 4, 4)), requires_grad=True)
        c = rng.standard_normal((3, 8, 4 // stride, 4 // stride))
        return (lambda: (unit(x) * c).sum()), dict(unit.named_parameters()) | {"x": x}

    def head_case():
        x = Tensor(rng.standard_normal((4, 5, 3, 3)), requires_grad=True)
        return (lambda: softmax_cross_entropy(global_avg_pool(x).reshape(4, 5), [0, 3, 1, 4])), {"x": x}

    return {
        "conv standard": conv_case(3, 4, 3, 1, 1, bias=True),
        "conv standard stride 2": conv_case(3, 4, 3, 2, 1),
        "conv depthwise": conv_case(4, 4, 3, 1, 4),
        "conv depthwise k5 stride 2": conv_case(4, 4, 5, 2, 4, spatial=6),
        "conv grouped": conv_case(4, 6, 3, 1, 2),
        "dense": conv_case(5, 3, 1, 1, 1, bias=True, spatial=1),
        "batch-norm train": bn_case(),
        "relu": act_case("relu"),
        "swish": act_case("swish"),
        "sigmoid": act_case("sigmoid"),
        "squeeze-excite": se_case(),
        "unit swish+se depthwise": unit_case("swish", True, "depthwise", 1),
        "unit relu grouped stride 2": unit_case("relu", False, "grouped", 2),
        "pool + cross-entropy": head_case(),
    }


def test_c1_gradient_suite(verdict):
    t0 = time.perf_counter()
    errors = {}
    margins = {}
    for name, (loss, tensors) in _grad_cases(np.random.default_rng(2024)).items():
        rep = check_gradients(loss, tensors)
        errors[name] = rep.max_rel_error
        margins[name] = rep.relu_margin
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-4 and elapsed < 60 and min(margins.values()) > 1e-4  # 10x the difference step
    verdict(1, ok, f"{len(errors)} layer cases, worst rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f} s")
    assert ok, errors


# -- 2 -----------------------------------------------------------------------


def test_c2_metric_oracles(verdict):
    from test_distill import _loop_nsa, _loop_nsr

    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        y = rng.standard_normal((3, 4, 3, 3)) * rng.uniform(0.2, 3, (1, 4, 1, 1)) + rng.standard_normal((1, 4, 1, 1))
        yhat = y + rng.standard_normal(y.shape) * rng.uniform(0.01, 2)
        s = channel_stats(y)
        for fast, slow in ((compute_nsr, _loop_nsr), (compute_nsa, _loop_nsa)):
            a, b = fast(y, yhat, s), slow(y, yhat)
            worst = max(worst, abs(a - b) / abs(b))
    y = rng.standard_normal((8, 5, 4, 4)) * 3 + 2
    mean_pred = np.broadcast_to(y.mean(axis=(0, 2, 3)).reshape(1, -1, 1, 1), y.shape)
    anchor = compute_nsr(y, mean_pred, channel_stats(y))
    exact = 0
    for _ in range(1000):
        a = rng.integers(0, 6, 20).astype(float)
        b = rng.integers(0, 6, 20).astype(float)
        exact += kendall_tau(a, b) == pair_count_tau(a, b)
    ok = worst <= 1e-12 and abs(anchor - 1.0) <= 1e-9 and exact == 1000
    verdict(2, ok, f"NSR/NSA vs loops rel {worst:.1e}; mean-predictor NSR {anchor:.12f}; tau exact {exact}/1000")
    assert ok


# -- 3 -----------------------------------------------------------------------


def test_c3_bkd_capacity_ordering(verdict):
    per_seed = acc.c3_summary()
    holds = []
    for seed, s in per_seed.items():
        for n, row in s["positions"].items():
            holds.append(row["depth1"] > row["depth3"])
    projected = max(s["projected_seconds"] for s in per_seed.values()) / 60
    serial = max(s["serial_seconds"] for s in per_seed.values()) / 60
    ok = all(holds) and len(per_seed) >= 3 and projected < 10
    gaps = [round(r["depth1"] - r["depth3"], 4) for s in per_seed.values() for r in s["positions"].values()]
    verdict(
        3, ok,
        f"depth1 > depth3 NSR in {sum(holds)}/{len(holds)} (seed,position) pairs, gaps {gaps}; "
        f"one seed {serial:.1f} min on 1 core, {projected:.1f} min projected at {acc.WORKERS_CLAIMED} workers",
    )
    assert ok


# -- 4, 5 --------------------------------------------------------------------


@pytest.fixture(scope="module")
def predictor_runs():
    return acc.c4_summary()


def test_c4_predictor_quality(verdict, predictor_runs):
    kt = [r["kt20"] for r in predictor_runs.values()]
    dna = [r["dna_kt"] for r in predictor_runs.values()]
    ok = np.mean(kt) >= 0.6 and np.mean(kt) >= np.mean(dna)
    verdict(
        4, ok,
        f"KT per seed {[round(k, 3) for k in kt]} mean {np.mean(kt):.3f} (>= 0.6); "
        f"DNA KT {[round(k, 3) for k in dna]} mean {np.mean(dna):.3f}",
    )
    assert ok


def test_c5_library_size_trend(verdict, predictor_runs):
    k20 = [r["kt20"] for r in predictor_runs.values()]
    k8 = [r["kt_small"] for r in predictor_runs.values()]
    ok = np.mean(k20) >= np.mean(k8)
    verdict(5, ok, f"mean KT T=20 {np.mean(k20):.3f} vs T=8 {np.mean(k8):.3f} (per seed {[round(k, 3) for k in k8]})")
    assert ok


# -- 6 -----------------------------------------------------------------------


def test_c6_search_exactness(verdict, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(66)
    lib = fake_library(tmp_path, TOY, [list(rng.uniform(0.05, 0.8, 8)) for _ in range(3)])
    from donna.distill import FinetuneRecord
    from donna.predictor import fit_predictor, predict
    from donna.space import encode

    train = sample_uniform(TOY, 25, 5)
    recs = [FinetuneRecord(encode(g), 0.96 - 0.05 * float(lib.metric(TOY, g).sum()) + 0.005 * rng.standard_normal(), 5, "bkd", 0) for g in dict.fromkeys(train)]
    model = fit_predictor(TOY, lib, recs)
    accf = lambda g: predict(model, TOY, g, lib)  # noqa: E731
    cost = make_cost_model("macs", TOY)
    every = list(enumerate_genomes(TOY))
    pts = np.array([(accf(g), cost(g)) for g in every])
    # brute force: i survives unless some j is at least as good on both and better on one
    ge = (pts[None, :, 0] >= pts[:, None, 0]) & (pts[None, :, 1] <= pts[:, None, 1])
    gt = (pts[None, :, 0] > pts[:, None, 0]) | (pts[None, :, 1] < pts[:, None, 1])
    exact = {every[i] for i in np.flatnonzero(~(ge & gt).any(axis=1))}
    res = nsga2_search(TOY, accf, cost, SearchConfig(population=32, generations=100, seed=1))
    found = {i.genome for i in res.front}
    elapsed = time.perf_counter() - t0
    ok = found == exact and elapsed < 60
    verdict(6, ok, f"front {len(found)} vs exhaustive {len(exact)} points, identical={found == exact}, "
                   f"{res.evaluations} evaluations, {elapsed:.1f} s")
    assert ok


# -- 7 -----------------------------------------------------------------------


def test_c7_random_vs_nsga(verdict):
    run = acc.pipeline_run("run1")
    with open(run / "search" / "random_vs_nsga.csv") as f:
        rows = list(csv.DictReader(f))
    best = {m: [float(r["best"]) for r in rows if r["method"] == m] for m in ("random", "nsga2")}
    evals = {int(r["evaluations"]) for r in rows}
    ok = len(best["nsga2"]) >= 3 and np.mean(best["nsga2"]) >= np.mean(best["random"]) and evals == {190}
    verdict(
        7, ok,
        f"best predicted top-1 over {len(best['nsga2'])} seeds: NSGA-II {np.mean(best['nsga2']):.4f} "
        f"vs random {np.mean(best['random']):.4f} at 190 evaluations, "
        f"MAC band [{float(rows[0]['band_low']):.0f}, {float(rows[0]['band_high']):.0f}]",
    )
    assert ok


# -- 8 -----------------------------------------------------------------------


def test_c8_finetune_speedup(verdict):
    pairs = acc.c8_pairs()
    gap = float(np.mean([p["scratch"] - p["finetune"] for p in pairs]))
    ok = len(pairs) == 5 and gap <= 0.01
    detail = ", ".join(f"{p['finetune']:.3f}/{p['scratch']:.3f}" for p in pairs)
    verdict(8, ok, f"10-epoch finetune vs 50-epoch scratch (ft/scratch): {detail}; mean shortfall {gap:+.4f} (<= 0.01)")
    assert ok


# -- 9 -----------------------------------------------------------------------


def test_c9_cost_ledger(verdict):
    a, _ = cost_ledger(450, 1920, 1, 30, 50)
    b, _ = cost_ledger(450, 135, 1, 20, 50)
    r = random_search_ratio(100, 450, 50)
    ok = a == 3870 and b == 1585 and r == 900
    verdict(9, ok, f"search ledger {a}, compression ledger {b}, random-search ratio {r:g}")
    assert ok


# -- 10 ----------------------------------------------------------------------


def test_c10_counters(verdict, tmp_path):
    space = builtin_space("desk")
    nets = [build_reference()] + [build_network(space.preset, space.block_choices(g)) for g in sample_uniform(space, 20, 10)]
    mismatches = 0
    for i, net in enumerate(nets):
        with count_multiplies() as box, no_grad():
            net.eval()(Tensor(np.zeros((1, 3, 16, 16))))
        path = tmp_path / f"{i}.dnw"
        save_snapshot(path, net.state_dict(buffers=False))
        stored = sum(v.size for v in load_snapshot(path).values())
        mismatches += (count_macs(net, (3, 16, 16)) != box[0]) + (count_params(net) != stored)
    card = cardinality(builtin_space("paper-grid"))
    ok = mismatches == 0 and card == 384**5 and card > 8 * 10**12
    verdict(10, ok, f"{len(nets)} models, {mismatches} counter mismatches; paper-grid cardinality {card:,}")
    assert ok


# -- 11 ----------------------------------------------------------------------


def test_c11_generalization(verdict):
    res = acc.c11_summary()
    ok = res["train_all_depthwise"] and res["grouped_scored"] > 0 and np.isfinite(res["kt"])
    verdict(11, ok, f"depthwise-only predictor scored {res['test']} mixed genomes "
                    f"({res['grouped_scored']} with grouped convs); KT {res['kt']:.3f} (informational)")
    assert ok


# -- 12 ----------------------------------------------------------------------


def test_c12_determinism(verdict):
    a, b = acc.pipeline_run("run1"), acc.pipeline_run("run2")
    ca, cb = acc.metric_csvs(a), acc.metric_csvs(b)
    differ = sorted(k for k in ca.keys() | cb.keys() if ca.get(k) != cb.get(k))
    t = acc.projected_pipeline_seconds(b)
    projected = t["projected_seconds"] / 60
    ok = not differ and len(ca) > 20 and projected < 30
    verdict(
        12, ok,
        f"{len(ca)} metric CSVs, {len(differ)} differ between two seed-1 runs; wall {t['serial_seconds'] / 60:.1f} min "
        f"on 1 core, {projected:.1f} min projected at {acc.WORKERS_CLAIMED} workers",
    )
    assert ok, differ
