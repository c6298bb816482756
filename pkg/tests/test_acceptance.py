"""Acceptance criteria 1-10, each printing one PASS/FAIL line."""
import time

import numpy as np
import pytest

from priorpose import estimator
from priorpose.bench import BenchConfig, pose_auc, run_benchmark
from priorpose.cli import main
from priorpose.fivepoint import essential_residuals, solve_five_point_batch
from priorpose.geometry import (
    decompose_essential,
    essential_from_pose,
    fundamental_from_pose,
    pose_error,
    sampson_distance,
)
from priorpose.matcher import MatcherConfig, match, sinkhorn_assign
from priorpose.prior import PriorConfig, coarse_pose_from_map, correlate_grids, noisy_oracle_prior
from priorpose.scorer import init_weights, label_from_errors
from priorpose.simulator import GridConfig, SceneConfig, generate_feature_grids, generate_pair

from conftest import HISTOGRAM_CHECKS, K_DEFAULT, random_pose, scene
from test_bench import auc_trapezoid
from test_estimator import aligned_distance, histogram_oracle
from test_matcher import one_by_one_oracle
from test_scorer import SMALL, finite_difference_check


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return report


def test_criterion_1_geometry(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_pose = worst_alg = worst_sampson = 0.0
    for _ in range(1000):
        pose = random_pose(rng)
        cands = decompose_essential(essential_from_pose(pose))
        worst_pose = max(worst_pose, min(pose_error(c, pose)[2] for c in cands))
        uvA, uvB = scene(rng, pose, 20)
        F = fundamental_from_pose(K_DEFAULT, K_DEFAULT, pose)
        hA, hB = np.column_stack([uvA, np.ones(20)]), np.column_stack([uvB, np.ones(20)])
        worst_alg = max(worst_alg, np.abs(np.einsum("ni,ij,nj->n", hB, F, hA)).max())
        worst_sampson = max(worst_sampson, np.max(sampson_distance(F, uvA, uvB)))
    secs = time.perf_counter() - t0
    ok = worst_pose < 1e-5 and worst_alg < 1e-9 and worst_sampson < 1e-12 and secs < 10
    verdict(1, ok, f"pose {worst_pose:.2e} deg, |x'Fx| {worst_alg:.2e}, sampson {worst_sampson:.2e}, {secs:.1f} s")


def test_criterion_2_five_point(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    poses, xA, xB = [], [], []
    for _ in range(1000):
        pose = random_pose(rng)
        a, b = scene(rng, pose, 5)
        poses.append(pose)
        xA.append(K_DEFAULT.normalize(a))
        xB.append(K_DEFAULT.normalize(b))
    E, mask = solve_five_point_batch(np.array(xA), np.array(xB))
    worst = max(min(aligned_distance(e, essential_from_pose(p)) for e in E[i][mask[i]]) if mask[i].any() else np.inf
                for i, p in enumerate(poses))
    _, trace = essential_residuals(E[mask])
    secs = time.perf_counter() - t0
    ok = worst < 1e-6 and np.abs(trace).max() < 1e-8 and secs < 30
    verdict(2, ok, f"true E within {worst:.2e}, trace identity {np.abs(trace).max():.2e}, {secs:.1f} s")


def test_criterion_3_histogram(verdict):
    rng = np.random.default_rng(103)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        d = rng.uniform(0, 20, n)
        # exact bin edges are the hard cases for the strict comparison
        edges = rng.integers(1, 65, n) / 64 * 12.6
        d = np.where(rng.random(n) < 0.2, edges, d)
        n_c = n + int(rng.integers(0, 10))
        h = estimator.inlier_histogram(d, n_c)
        mismatches += not np.array_equal(h, histogram_oracle(d, n_c))
    ok = mismatches == 0 and HISTOGRAM_CHECKS["calls"] >= 1000
    verdict(3, ok, f"{mismatches} oracle mismatches; {HISTOGRAM_CHECKS['calls']} histograms checked monotone so far")


def test_criterion_4_sinkhorn(verdict):
    rng = np.random.default_rng(104)
    converged, worst = 0, 0.0
    for _ in range(300):
        m, n = rng.integers(1, 30, 2)
        cfg = MatcherConfig(dustbin=float(rng.uniform(-0.5, 1)), entropy=float(rng.uniform(0.05, 0.5)))
        plan, info = sinkhorn_assign(rng.uniform(-1, 1, (m, n)), cfg, return_info=True)
        if info["violation"] >= cfg.tolerance:
            continue
        converged += 1
        worst = max(worst, np.abs(plan[:m].sum(axis=1) - 1).max(), np.abs(plan[:, :n].sum(axis=0) - 1).max(),
                    abs(plan[m].sum() - n) / n, abs(plan[:, n].sum() - m) / m)
    closed = 0.0
    for s, alpha, eps in [(0.5, 0.3, 0.1), (0.2, 0.3, 0.1), (0.9, -0.2, 0.5), (-0.4, 0.1, 0.25)]:
        plan = sinkhorn_assign(np.array([[s]]), MatcherConfig(dustbin=alpha, entropy=eps))
        p = one_by_one_oracle(s, alpha, eps)
        closed = max(closed, np.abs(plan - [[p, 1 - p], [1 - p, p]]).max())
    ok = converged >= 100 and worst < 1e-5 and closed < 1e-6
    verdict(4, ok, f"{converged}/300 converged, worst marginal {worst:.2e}, 2x2 closed form {closed:.2e}")


def test_criterion_5_gradients_and_labels(verdict):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        w = init_weights(seed, SMALL)
        for p in w.parameters():
            p += rng.normal(scale=0.1, size=p.shape)
        X = rng.normal(size=(4, 74))
        y = rng.uniform(0, 1, 4)
        worst = max(worst, finite_difference_check(w, X, y))
    labels = (label_from_errors(0, 0), label_from_errors(4, 16), label_from_errors(30, 30))
    ok = worst < 1e-4 and labels == (1.0, 0.5, 0.0)
    verdict(5, ok, f"worst relative gradient error {worst:.2e} over 50 triples, labels {labels}")


def test_criterion_6_ordering(verdict):
    t0 = time.perf_counter()
    cfg = BenchConfig()
    rep = run_benchmark(cfg)
    secs = time.perf_counter() - t0
    auc = {v.variant.name: v.auc((5.0,))[0] for v in rep.variants}
    ok = (auc["full"] >= auc["epi"] >= auc["baseline"] and auc["full"] >= auc["baseline"] + 0.05
          and secs < 600 and cfg.pairs == 500)
    detail = ", ".join(f"{k} {v:.4f}" for k, v in auc.items())
    verdict(6, ok, f"AUC@5 {detail}; {cfg.pairs} pairs, {secs:.0f} s")


def test_criterion_7_matcher_prior(verdict):
    scene_cfg = SceneConfig(descriptor_noise=0.6, coherent_fraction=0.35, distractors=50)
    found = {0.0: [0, 0], 1.0: [0, 0]}
    for seed in range(100):
        pair = generate_pair(scene_cfg.replace(seed=seed))
        prior = noisy_oracle_prior(pair.pose, PriorConfig(), seed)
        truth = pair.true_matches()
        for w in found:
            m = match(pair.keypoints_a, pair.keypoints_b, pair.K_A, pair.K_B, prior, MatcherConfig(weight=w))
            found[w][0] += len(m.pairs() & truth)
            found[w][1] += len(m)
    p0, p1 = (found[w][0] / found[w][1] for w in (0.0, 1.0))
    verdict(7, p1 - p0 >= 0.10, f"precision {p1:.3f} with penalty vs {p0:.3f} without ({100 * (p1 - p0):.1f} pp)")


def test_criterion_8_prior(verdict):
    pair = generate_pair(SceneConfig(seed=3, pixel_noise=0.0))
    cmap = correlate_grids(*generate_feature_grids(pair, GridConfig(seed=3)))
    clean = pose_error(coarse_pose_from_map(cmap, pair.K_A, pair.K_B), pair.pose)[2]
    rng = np.random.default_rng(7)
    flat = cmap.reshape(-1, 5).copy()
    idx = rng.choice(len(flat), int(0.3 * len(flat)), replace=False)
    flat[idx, 2] = rng.integers(0, cmap.shape[1], len(idx))
    flat[idx, 3] = rng.integers(0, cmap.shape[0], len(idx))
    noisy = pose_error(coarse_pose_from_map(flat.reshape(cmap.shape), pair.K_A, pair.K_B), pair.pose)[2]
    verdict(8, clean < 0.5 and noisy < 3.0, f"clean {clean:.3f} deg, 30% corrupted {noisy:.3f} deg")


def test_criterion_9_determinism(verdict, tmp_path, capsys):
    (tmp_path / "b.ini").write_text(
        "[scene]\npoints = 120\ndistractors = 20\ncoherent_fraction = 0.35\ndescriptor_noise = 0.6\n\n"
        "[bench]\npairs = 6\ntrain_pairs = 4\ntrain_epochs = 2\nhypotheses = 120\nseed = 5\n"
    )
    for run in ("a", "b"):
        assert main(["bench", "--config", str(tmp_path / "b.ini"), "--out", str(tmp_path / run)]) == 0
    capsys.readouterr()
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("summary.csv", "errors.csv", "config.ini")]
    verdict(9, all(same), f"summary/errors/config identical: {same}")


def test_criterion_10_auc(verdict):
    rng = np.random.default_rng(110)
    worst = 0.0
    for _ in range(100):
        e = rng.exponential(8.0, 500)
        e[rng.random(500) < 0.1] = np.inf
        tau = float(rng.choice([5.0, 10.0, 20.0]))
        worst = max(worst, abs(pose_auc(e, tau) - auc_trapezoid(e, tau)))
    worked = (pose_auc([5.0], 10), pose_auc([2.0, 8.0, np.inf], 10))
    ok = worst < 1e-6 and worked == (0.5, 1 / 3)
    verdict(10, ok, f"worst trapezoid gap {worst:.2e}; worked values {worked}")
