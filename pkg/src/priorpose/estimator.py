"""Prior-guided RANSAC: 6-point hypotheses, five-point solving, Sampson inlier
analysis and selection of the best of the top-k hypotheses by a scorer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fivepoint import solve_five_point_batch
from .geometry import (
    CameraIntrinsics,
    DegenerateError,
    Pose,
    batch_sampson,
    cheirality_select,
    decompose_essential,
    fundamental_from_pose,
    sampson_distance,
)
from .prior import eight_point

log = logging.getLogger(__name__)

SAMPLE_SIZE = 6
PRIOR_FEATURES = SAMPLE_SIZE
HISTOGRAM_BINS = 64


@dataclass(frozen=True)
class EstimatorConfig:
    hypotheses: int = 2000
    top_k: int = 100
    threshold: float = 12.6  # Sampson distance, pixels^2
    bins: int = HISTOGRAM_BINS
    solver: str = "five-point"  # five-point | eight-point
    scorer: str = "inlier"  # inlier | learned
    weights: str | None = None
    sample_size: int = SAMPLE_SIZE
    seed: int = 0

    def __post_init__(self):
        if not self.hypotheses >= self.top_k >= 1:
            raise ValueError("need hypotheses >= top_k >= 1")
        if self.solver not in ("five-point", "eight-point"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.solver == "five-point" and self.sample_size != SAMPLE_SIZE:
            raise ValueError("five-point mode samples exactly 6 correspondences")
        if self.solver == "eight-point" and self.sample_size < 8:
            raise ValueError("eight-point mode needs sample_size >= 8")
        if self.scorer not in ("inlier", "learned"):
            raise ValueError(f"unknown scorer {self.scorer!r}")


@dataclass
class HypothesisFeatures:
    prior_distances: np.ndarray  # (6,) sorted ascending
    histogram: np.ndarray  # (n_b,) b_1 .. b_nb
    descriptor_summary: np.ndarray  # (2 D,)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.prior_distances, self.histogram, self.descriptor_summary])


@dataclass
class Hypothesis:
    index: int
    seeds: np.ndarray
    essential: np.ndarray
    inlier_count: int = 0
    distances: np.ndarray | None = field(default=None, repr=False)
    features: HypothesisFeatures | None = field(default=None, repr=False)


@dataclass
class EstimateResult:
    pose: Pose
    inlier_mask: np.ndarray
    essential: np.ndarray
    hypotheses: list
    scores: np.ndarray
    winner: int
    diagnostics: dict


def sample_hypotheses(n_corrs: int, cfg: EstimatorConfig, rng) -> np.ndarray:
    """(N, sample_size) index array; each row is a uniform sample without replacement."""
    k = cfg.sample_size
    if n_corrs < k:
        raise DegenerateError(f"need at least {k} correspondences, got {n_corrs}")
    keys = rng.random((cfg.hypotheses, n_corrs))
    if n_corrs == k:
        return np.argsort(keys, axis=1)
    return np.argpartition(keys, k - 1, axis=1)[:, :k]


def _solve_batch(xA, xB, solver):
    """Essential matrices (N, 3, 3) and validity mask for stacked seed sets."""
    if solver == "eight-point":
        if xA.shape[1] < 8:
            raise DegenerateError("eight-point mode needs at least 8 seeds")
        E = eight_point(xA, xB)
        return E, np.all(np.isfinite(E), axis=(1, 2))
    Es, mask = solve_five_point_batch(xA[:, :5], xB[:, :5])
    # disambiguate the up-to-10 roots by the 6th seed
    a = np.concatenate([xA[:, 5], np.ones((len(xA), 1))], axis=1)
    b = np.concatenate([xB[:, 5], np.ones((len(xB), 1))], axis=1)
    Ea = np.einsum("nsij,nj->nsi", Es, a)
    Etb = np.einsum("nsji,nj->nsi", Es, b)
    num = np.einsum("nj,nsj->ns", b, Ea) ** 2
    den = Ea[..., 0] ** 2 + Ea[..., 1] ** 2 + Etb[..., 0] ** 2 + Etb[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(mask & (den > 0), num / np.where(den > 0, den, 1.0), np.inf)
    best = np.argmin(err, axis=1)
    valid = np.isfinite(err[np.arange(len(best)), best])
    return Es[np.arange(len(best)), best], valid


def solve_minimal(uvA, uvB, K_A: CameraIntrinsics, K_B: CameraIntrinsics, solver: str = "five-point") -> np.ndarray:
    """Essential matrix from one seed set (6 correspondences for five-point mode)."""
    xA = K_A.normalize(np.asarray(uvA, dtype=float))[None]
    xB = K_B.normalize(np.asarray(uvB, dtype=float))[None]
    if solver == "five-point" and xA.shape[1] != SAMPLE_SIZE:
        raise ValueError("five-point mode takes exactly 6 correspondences")
    E, valid = _solve_batch(xA, xB, solver)
    if not valid[0]:
        raise DegenerateError("minimal problem is degenerate or has no real solution")
    return E[0]


def _fundamentals(E, K_A, K_B):
    F = K_B.K_inv.T @ E @ K_A.K_inv
    return F / np.linalg.norm(F, axis=(-2, -1), keepdims=True)


def count_inliers(E, uvA, uvB, K_A: CameraIntrinsics, K_B: CameraIntrinsics, threshold: float):
    F = _fundamentals(np.asarray(E, dtype=float), K_A, K_B)
    d = np.atleast_1d(sampson_distance(F, uvA, uvB))
    return int(np.count_nonzero(d < threshold)), d


def inlier_histogram(distances, n_c: int, threshold: float = 12.6, bins: int = HISTOGRAM_BINS) -> np.ndarray:
    """Cumulative inlier ratios b_1 .. b_nb with b_k = #(d < k/n_b * threshold) / n_c."""
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    d = np.sort(np.asarray(distances, dtype=float).ravel())
    edges = np.arange(1, bins + 1) / bins * threshold
    return np.searchsorted(d, edges, side="left") / n_c


def prior_distances(seeds, uvA, uvB, prior: Pose, K_A, K_B) -> np.ndarray:
    F = fundamental_from_pose(K_A, K_B, prior)
    return np.sort(np.atleast_1d(sampson_distance(F, uvA[seeds], uvB[seeds])))


def hypothesis_features(hyp: Hypothesis, prior: Pose, uvA, uvB, descA, descB,
                        K_A, K_B, cfg: EstimatorConfig) -> HypothesisFeatures:
    if hyp.distances is None:
        _, hyp.distances = count_inliers(hyp.essential, uvA, uvB, K_A, K_B, cfg.threshold)
    summary = np.concatenate([descA[hyp.seeds], descB[hyp.seeds]], axis=1).mean(axis=0)
    return HypothesisFeatures(
        prior_distances(hyp.seeds, uvA, uvB, prior, K_A, K_B),
        inlier_histogram(hyp.distances, len(uvA), cfg.threshold, cfg.bins),
        summary,
    )


def rank_hypotheses(uvA, uvB, K_A: CameraIntrinsics, K_B: CameraIntrinsics, cfg: EstimatorConfig):
    """Sample, solve and count; returns (top-k hypotheses, stage counts)."""
    uvA = np.asarray(uvA, dtype=float)
    uvB = np.asarray(uvB, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    seeds = sample_hypotheses(len(uvA), cfg, rng)
    xA, xB = K_A.normalize(uvA), K_B.normalize(uvB)
    E, valid = _solve_batch(xA[seeds], xB[seeds], cfg.solver)
    idx = np.flatnonzero(valid)
    stats = {"sampled": int(len(seeds)), "solved": int(len(idx))}
    if len(idx) == 0:
        raise DegenerateError("every hypothesis was degenerate")
    F = _fundamentals(E[idx], K_A, K_B)
    dist = batch_sampson(F, uvA, uvB)
    counts = np.count_nonzero(dist < cfg.threshold, axis=1)
    # descending count, ties to the lower hypothesis index
    order = np.lexsort((idx, -counts))[: cfg.top_k]
    hyps = [
        Hypothesis(int(idx[o]), seeds[idx[o]], E[idx[o]], int(counts[o]), dist[o])
        for o in order
    ]
    stats["top_k"] = len(hyps)
    return hyps, stats


def select(hyps, scores) -> int:
    """Position of the best hypothesis: max score, ties to the lower hypothesis index."""
    scores = np.asarray(scores, dtype=float)
    index = np.array([h.index for h in hyps])
    return int(np.lexsort((index, -scores))[0])


def finalize(hyp: Hypothesis, uvA, uvB, K_A, K_B, threshold: float) -> tuple[Pose, np.ndarray]:
    """Decompose the hypothesis and pick the candidate by cheirality over its inliers."""
    mask = hyp.distances < threshold
    use = mask if mask.any() else np.isin(np.arange(len(uvA)), hyp.seeds)
    pose = cheirality_select(decompose_essential(hyp.essential), uvA[use], uvB[use], K_A, K_B)
    return pose, mask


class InlierCountScorer:
    needs_features = False

    def score(self, hyps, features=None) -> np.ndarray:
        return np.array([h.inlier_count for h in hyps], dtype=float)


def estimate_pose(uvA, uvB, descA, descB, prior: Pose | None,
                  K_A: CameraIntrinsics, K_B: CameraIntrinsics,
                  cfg: EstimatorConfig = EstimatorConfig(), scorer=None) -> EstimateResult:
    """Robust relative pose from pixel correspondences.

    ``scorer`` is any object with ``needs_features`` and ``score(hyps, X)``;
    None means the inlier-count baseline (or the learned scorer loaded from
    ``cfg.weights`` when ``cfg.scorer == "learned"``).
    """
    uvA = np.asarray(uvA, dtype=float)
    uvB = np.asarray(uvB, dtype=float)
    if scorer is None:
        if cfg.scorer == "learned":
            from .scorer import LearnedScorer

            if cfg.weights is None:
                raise ValueError("learned scorer needs a weights path")
            scorer = LearnedScorer.from_file(cfg.weights)
        else:
            scorer = InlierCountScorer()
    hyps, stats = rank_hypotheses(uvA, uvB, K_A, K_B, cfg)
    return score_and_select(hyps, stats, uvA, uvB, descA, descB, prior, K_A, K_B, cfg, scorer)


def score_and_select(hyps, stats, uvA, uvB, descA, descB, prior: Pose | None,
                     K_A: CameraIntrinsics, K_B: CameraIntrinsics,
                     cfg: EstimatorConfig, scorer) -> EstimateResult:
    """Second half of estimate_pose: score ranked hypotheses and decompose the winner."""
    X = None
    if scorer.needs_features:
        if prior is None:
            raise ValueError("the learned scorer needs a motion prior")
        descA = np.asarray(descA, dtype=float)
        descB = np.asarray(descB, dtype=float)
        for h in hyps:
            if h.features is None:
                h.features = hypothesis_features(h, prior, uvA, uvB, descA, descB, K_A, K_B, cfg)
        X = np.stack([h.features.vector() for h in hyps])
    scores = np.asarray(scorer.score(hyps, X), dtype=float)
    w = select(hyps, scores)
    pose, mask = finalize(hyps[w], uvA, uvB, K_A, K_B, cfg.threshold)
    diagnostics = dict(stats)
    diagnostics.update(
        correspondences=int(len(uvA)),
        winner_index=hyps[w].index,
        winner_rank=w,
        winner_score=float(scores[w]),
        winner_inliers=hyps[w].inlier_count,
        scorer=type(scorer).__name__,
    )
    return EstimateResult(pose, mask, hyps[w].essential, hyps, scores, w, diagnostics)


def hypothesis_poses(hyps, uvA, uvB, K_A, K_B, threshold) -> list[Pose | None]:
    """Decomposed pose of every hypothesis (None where decomposition fails)."""
    out = []
    for h in hyps:
        try:
            out.append(finalize(h, uvA, uvB, K_A, K_B, threshold)[0])
        except DegenerateError:
            out.append(None)
    return out


def read_correspondences(path):
    """Lines "uA vA uB vB confidence"; returns (uvA, uvB, confidence)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    a = np.array(rows, dtype=float).reshape(-1, 5)
    return a[:, 0:2], a[:, 2:4], a[:, 4]


def write_correspondences(path, uvA, uvB, confidence):
    with open(path, "w") as fh:
        for a, b, c in zip(np.asarray(uvA), np.asarray(uvB), np.asarray(confidence)):
            fh.write(" ".join(repr(float(v)) for v in (*a, *b, c)) + "\n")


def format_diagnostics(diag: dict) -> str:
    """One "key value" line per entry, keys sorted."""
    return "".join(f"{k} {v!r}\n" if isinstance(v, float) else f"{k} {v}\n" for k, v in sorted(diag.items()))
