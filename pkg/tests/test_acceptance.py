"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

The ablation criteria share one module-scoped sweep over the synthetic suite
(20 prompts x 5 seeds) so the suite is sampled once.
"""

import time
from itertools import product

import numpy as np
import pytest
import torch
from helpers import fd_check, relative_error, small_instance

from isac import masking
from isac.attention import DTYPE, minmax_normalize
from isac.cli import main
from isac.engine import RunConfig
from isac.evaluation import (
    COCO_CATEGORIES,
    BenchPrompt,
    Detection,
    ablation_run,
    combination_count,
    ensemble_filter,
    multiclass_accuracy,
    multiinstance_accuracy,
    synthetic_suite,
)
from isac.losses import LossWeights, mpo

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
MARGIN = 5.0


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def T(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def test_gradient_correctness(report):
    def go():
        worst, kept = 0.0, 0
        for seed in range(20):
            g, fd, keep, _ = fd_check(*small_instance(seed, H=8, W=8, d=4, weights=LossWeights(0.6, 0.4)))
            kept += int(keep.sum())
            worst = max(worst, relative_error(g[keep], fd[keep]))
        return worst, kept

    (worst, kept), secs = timed(go)
    report("gradient vs central FD", worst <= 1e-4 and kept > 0 and secs < 60,
           f"max rel err {worst:.2e} over {kept} coords, {secs:.1f}s")


def test_mpo_properties(report):
    def go():
        rng = np.random.default_rng(0)
        bad = 0
        for _ in range(1000):
            n = int(rng.integers(1, 64))
            a, b = rng.random(n), rng.random(n)
            v = mpo(T(a), T(b)).item()
            bad += v != mpo(T(b), T(a)).item()
            bad += not 0.0 <= v <= 1.0
            up = np.minimum(a + rng.random(n) * (1 - a), 1.0)
            bad += mpo(T(up), T(b)).item() < v
            support = rng.random(n) < 0.5
            bad += mpo(T(a * support), T(b * ~support)).item() != 0.0
        return bad

    bad, secs = timed(go)
    report("MPO properties", bad == 0 and secs < 5, f"{bad} violations in 1000 pairs, {secs:.2f}s")


def test_normalization_invariances(report):
    def go():
        rng = np.random.default_rng(1)
        bad = 0
        for _ in range(500):
            x = rng.random((int(rng.integers(1, 20)), int(rng.integers(1, 5))))
            # powers of two keep the scaled values and column means exact
            s = 2.0 ** rng.integers(-4, 5, x.shape[1])
            bad += not torch.equal(masking.binarize(T(x * s)), masking.binarize(T(x)))
        for _ in range(500):
            x = rng.random((int(rng.integers(2, 12)), int(rng.integers(2, 12))))
            a, c = rng.uniform(0.1, 10), rng.uniform(-5, 5)
            bad += not torch.allclose(minmax_normalize(T(a * x + c)), minmax_normalize(T(x)), atol=1e-9)
        return bad

    bad, secs = timed(go)
    report("binarize / minmax invariances", bad == 0 and secs < 5, f"{bad} violations in 1000 cases, {secs:.2f}s")


def planted_fixture(rng):
    k = int(rng.integers(2, 4))
    sizes = rng.multinomial(int(rng.integers(2 * k, 9)) - 2 * k, [1 / k] * k) + 2
    centers = rng.normal(0, 1, (k, 3))
    while True:
        gap = min(np.linalg.norm(centers[i] - centers[j]) for i in range(k) for j in range(i + 1, k))
        spread = gap / 8
        pts = np.vstack([c + rng.uniform(-spread, spread, (n, 3)) for c, n in zip(centers, sizes)])
        labels = np.repeat(np.arange(k), sizes)
        within = max(np.linalg.norm(pts[labels == c] - pts[labels == c].mean(0), axis=1).max() for c in range(k))
        if gap / max(within, 1e-12) >= 4:
            return pts, labels, k
        centers = centers * 2


def test_clustering_oracle(report):
    def go():
        rng = np.random.default_rng(2)
        bad = 0
        for i in range(50):
            pts, labels, k = planted_fixture(rng)
            best = min(
                masking.cluster_sse(pts, np.array(lab))
                for lab in product(range(k), repeat=len(pts))
                if lab[0] == 0 and len(set(lab)) == k
            )
            got = masking.kmeans_cluster(pts, k, seed=i).labels
            same = len(set(zip(got, labels))) == k
            bad += not (same and masking.cluster_sse(pts, got) == pytest.approx(best))
        return bad

    bad, secs = timed(go)
    report("k-means vs exhaustive partition", bad == 0 and secs < 30, f"{bad}/50 mismatches, {secs:.2f}s")


def test_propagation_contracts(report):
    def go():
        rng = np.random.default_rng(3)
        bad = 0
        for _ in range(500):
            n, m = int(rng.integers(1, 30)), int(rng.integers(1, 5))
            ca = T(rng.random((n, m)))
            bad += not torch.equal(masking.propagate_classes(torch.eye(n, dtype=DTYPE), ca), ca)
            out = masking.propagate_classes(T(rng.random((n, n))), ca)
            bad += not bool(((out >= 0) & (out <= 1)).all())
        return bad

    bad, secs = timed(go)
    report("propagation contracts", bad == 0 and secs < 5, f"{bad} violations in 500 cases, {secs:.2f}s")


def test_determinism(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"T": 50, "height": 32, "width": 32, "classes": ["cat", "dog"], "counts": [1, 2]}')
    secs = []
    for name in ("a", "b"):
        code, s = timed(lambda: main(["run", str(cfg), "--seed", "11", "--out", str(tmp_path / name)]))
        assert code == 0
        secs.append(s)
    same = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("losses.csv", "image.ppm", "manifest.json")
    )
    report("run determinism at 32x32, T=50", same and max(secs) < 10,
           f"identical={same}, slowest run {max(secs):.1f}s")


def test_hook_purity(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"T": 20, "classes": ["cat"], "counts": [3]}')
    assert main(["run", str(cfg), "--out", str(tmp_path / "plain")]) == 0
    assert main(["dump-attn", str(cfg), "--out", str(tmp_path / "dump"), "--timesteps", "20,10,1"]) == 0
    same = (tmp_path / "plain" / "losses.csv").read_bytes() == (tmp_path / "dump" / "losses.csv").read_bytes()
    report("hook purity", same, "dump vs no-dump losses.csv identical" if same else "losses.csv differs")


@pytest.fixture(scope="module")
def sweep():
    base = RunConfig()
    configs = {"baseline": RunConfig(eta=0.0)}
    configs.update({s: RunConfig(schedule=s) for s in "ACDE"})
    configs.update({k: RunConfig(loss_kind=k) for k in ("MAE", "KL", "IoU")})
    assert base.eta == 0.01 and base.schedule == "E" and base.loss_kind == "MPO"
    suite = synthetic_suite(0)
    start = time.perf_counter()
    results = {r.config_id: r for r in ablation_run(configs, suite, list(SEEDS))}
    per_config = (time.perf_counter() - start) / len(configs)
    return results, per_config


def fmt(results, kind, ids):
    return ", ".join(f"{i} {results[i].mean(kind):.1f}" for i in ids)


def test_schedule_ordering(report, sweep):
    r, per_config = sweep
    mi = {k: r[k].mean("multi-instance") for k in "ACDE"}
    mc = {k: r[k].mean("multi-class") for k in "AE"}
    ok = (
        mi["E"] - mi["C"] >= MARGIN
        and mi["C"] - mi["D"] >= MARGIN
        and mi["E"] - mi["A"] >= MARGIN
        and mc["E"] - mc["A"] >= MARGIN
    )
    runtime = 4 * per_config / 60
    report("schedule ordering E>=C>=D, E>=A (margin 5)", ok and runtime < 10,
           f"MI: {fmt(r, 'multi-instance', 'ECDA')}; MC: {fmt(r, 'multi-class', 'EA')}; {runtime:.1f} min")


def test_overlap_ordering(report, sweep):
    r, _ = sweep
    mpo_acc = r["E"].mean()
    ok = all(mpo_acc - r[k].mean() >= MARGIN for k in ("MAE", "KL", "IoU"))
    report("MPO beats MAE/KL/IoU (margin 5)", ok,
           f"aggregate: MPO {mpo_acc:.1f}, " + ", ".join(f"{k} {r[k].mean():.1f}" for k in ("MAE", "KL", "IoU")))


def test_baseline_uplift(report, sweep):
    r, _ = sweep
    up = r["E"].mean("multi-instance") - r["baseline"].mean("multi-instance")
    report("multi-instance uplift >= 15 over eta = 0", up >= 15.0,
           f"baseline {r['baseline'].mean('multi-instance'):.1f}, E {r['E'].mean('multi-instance'):.1f}, +{up:.1f}")


def test_accuracy_arithmetic(report):
    five = {"animal": ["cat", "dog", "horse", "sheep", "cow"]}
    mc = BenchPrompt("p", "multi-class", "animal", tuple(five["animal"]), (1,) * 5, "")
    mi = BenchPrompt("p", "multi-instance", "animal", ("cat",), (5,), "")
    a = multiclass_accuracy([Detection(0, (0, 0, 1, 1)), Detection(2, (2, 2, 3, 3))], mc, five)
    b = multiinstance_accuracy([Detection(0, (i, 0, i + 1, 1)) for i in range(3)], mi, five)
    report("accuracy worked examples", a == 40.0 and b == 60.0, f"2/5 classes -> {a}%, 3/5 instances -> {b}%")


def test_ensemble_voting(report):
    box, bad = (2, 2, 8, 8), 0
    for present in product([False, True], repeat=3):
        lists = [[Detection(0, box, str(i))] if p else [] for i, p in enumerate(present)]
        bad += len(ensemble_filter(lists)) != (1 if sum(present) >= 2 else 0)
    # two detectors at IoU exactly 0.5 agree; just below does not
    bad += len(ensemble_filter([[Detection(0, (0, 0, 10, 10))], [Detection(0, (0, 0, 10, 5))], []])) != 1
    bad += len(ensemble_filter([[Detection(0, (0, 0, 10, 10))], [Detection(0, (0, 0, 10, 4))], []])) != 0
    report("any-two ensemble voting", bad == 0, f"{bad} violations over 10 fixtures")


def test_benchmark_combinatorics(report):
    a, v = combination_count(COCO_CATEGORIES, "animal", 3), combination_count(COCO_CATEGORIES, "vehicle", 4)
    report("full-scale combination counts", (a, v) == (84, 70), f"animal k=3 -> {a}, vehicle k=4 -> {v}")
