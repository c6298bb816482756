"""Descriptor matching with a soft epipolar constraint and Sinkhorn assignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, essential_from_pose


@dataclass
class KeypointSet:
    positions: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(len(self.positions), -1)
        if len(self.positions) != len(self.descriptors):
            raise ValueError(
                f"{len(self.positions)} positions but {len(self.descriptors)} descriptors"
            )
        if len(self.descriptors):
            norms = np.linalg.norm(self.descriptors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("descriptors must be L2-normalized")

    def __len__(self):
        return len(self.positions)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class MatcherConfig:
    weight: float = 1.0  # epipolar penalty weight (lambda)
    saturation: float = 0.05  # line distance where the penalty saturates, normalized units
    iterations: int = 100
    tolerance: float = 1e-6
    dustbin: float = 0.3
    threshold: float = 0.2
    mutual: bool = True
    descriptor_scale: float = 1.0
    entropy: float = 0.1  # regularization; Sinkhorn runs on scores / entropy

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.saturation <= 0:
            raise ValueError("saturation must be positive")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")
        if self.entropy <= 0:
            raise ValueError("entropy must be positive")


@dataclass
class MatchResult:
    index_a: np.ndarray
    index_b: np.ndarray
    confidence: np.ndarray

    def __len__(self):
        return len(self.index_a)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.index_a.tolist(), self.index_b.tolist()))


def normalize_keypoints(kps: KeypointSet, K: CameraIntrinsics) -> np.ndarray:
    return K.normalize(kps.positions)


def epipolar_penalty_matrix(prior: Pose, kA: KeypointSet, kB: KeypointSet,
                            K_A: CameraIntrinsics, K_B: CameraIntrinsics,
                            cfg: MatcherConfig) -> np.ndarray:
    """Saturated squared distance of every B keypoint to every A keypoint's
    prior epipolar line, measured in normalized camera coordinates."""
    if cfg.weight == 0 or len(kA) == 0 or len(kB) == 0:
        return np.zeros((len(kA), len(kB)))
    E = essential_from_pose(prior)
    xA = np.column_stack([normalize_keypoints(kA, K_A), np.ones(len(kA))])
    xB = np.column_stack([normalize_keypoints(kB, K_B), np.ones(len(kB))])
    lines = xA @ E.T
    lines /= np.linalg.norm(lines, axis=1, keepdims=True)
    ab = np.hypot(lines[:, 0], lines[:, 1])
    ab = np.where(ab > 0, ab, np.finfo(float).tiny)
    dist = np.abs(lines @ xB.T) / ab[:, None]
    tau2 = cfg.saturation ** 2
    return cfg.weight * np.minimum(dist ** 2, tau2) / tau2


def score_matrix(kA: KeypointSet, kB: KeypointSet, penalty=None, descriptor_scale: float = 1.0) -> np.ndarray:
    S = kA.descriptors @ kB.descriptors.T / np.sqrt(descriptor_scale) if len(kA) and len(kB) else np.zeros((len(kA), len(kB)))
    if penalty is not None:
        S = S - penalty
    return S


def _lse(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


def sinkhorn_assign(S, cfg: MatcherConfig, return_info: bool = False):
    """Log-domain Sinkhorn on the dustbin-augmented score matrix.

    Row marginals are (1, ..., 1, N_B), column marginals (1, ..., 1, N_A).
    Returns the (N_A + 1, N_B + 1) transport plan.
    """
    S = np.asarray(S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise ValueError("score matrix must be finite")
    m, n = S.shape
    if m == 0 or n == 0:
        plan = np.zeros((m + 1, n + 1))
        plan[:m, n] = 1.0
        plan[m, :n] = 1.0
        return (plan, {"iterations": 0, "violation": 0.0}) if return_info else plan

    Z = np.full((m + 1, n + 1), cfg.dustbin / cfg.entropy)
    Z[:m, :n] = S / cfg.entropy
    log_mu = np.log(np.concatenate([np.ones(m), [n]]))
    log_nu = np.log(np.concatenate([np.ones(n), [m]]))
    mu = np.exp(log_mu)
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    violation = np.inf
    it = 0
    while it < cfg.iterations:
        r = _lse(Z + v[None, :], axis=1)
        if it:
            # columns are exact after each v-update; rows carry the residual
            violation = float(np.max(np.abs(np.exp(u + r) - mu)))
            if violation < cfg.tolerance:
                break
        u = log_mu - r
        v = log_nu - _lse(Z + u[:, None], axis=0)
        it += 1
    else:
        violation = float(np.max(np.abs(np.exp(u + _lse(Z + v[None, :], axis=1)) - mu)))
    plan = np.exp(Z + u[:, None] + v[None, :])
    if return_info:
        return plan, {"iterations": it, "violation": violation}
    return plan


def extract_matches(plan, cfg: MatcherConfig) -> MatchResult:
    P = np.asarray(plan)[:-1, :-1]
    if P.size == 0:
        empty = np.zeros(0, dtype=int)
        return MatchResult(empty, empty.copy(), np.zeros(0))
    best_b = np.argmax(P, axis=1)
    best_a = np.argmax(P, axis=0)
    rows = np.arange(P.shape[0])
    conf = P[rows, best_b]
    keep = (conf >= cfg.threshold) & (conf > 0)
    if cfg.mutual:
        keep &= best_a[best_b] == rows
    return MatchResult(rows[keep], best_b[keep], np.minimum(conf[keep], 1.0))


def match(kA: KeypointSet, kB: KeypointSet, K_A: CameraIntrinsics, K_B: CameraIntrinsics,
          prior: Pose | None = None, cfg: MatcherConfig = MatcherConfig()) -> MatchResult:
    """Full matcher: penalty (if a prior is given), scores, Sinkhorn, extraction."""
    penalty = None
    if prior is not None and cfg.weight > 0:
        penalty = epipolar_penalty_matrix(prior, kA, kB, K_A, K_B, cfg)
    S = score_matrix(kA, kB, penalty, cfg.descriptor_scale)
    return extract_matches(sinkhorn_assign(S, cfg), cfg)


# ---------------------------------------------------------------------------
# files


def _rows(path, width=None):
    """Numeric rows of a whitespace-separated text file as (line number, floats)."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            if width is not None and len(vals) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} values, got {len(vals)}")
            out.append((lineno, vals))
    return out


def write_keypoints(path, kps: KeypointSet):
    with open(path, "w") as fh:
        fh.write(f"{len(kps)} {kps.dim if len(kps) else 0}\n")
        for pos, d in zip(kps.positions, kps.descriptors):
            fh.write(" ".join(repr(float(v)) for v in np.concatenate([pos, d])) + "\n")


def read_keypoints(path) -> KeypointSet:
    rows = _rows(path)
    if not rows or len(rows[0][1]) != 2:
        raise ValueError(f"{path}:1: header must be 'n D'")
    n, d = (int(v) for v in rows[0][1])
    body = rows[1:]
    if len(body) != n:
        raise ValueError(f"{path}: header promises {n} keypoints, found {len(body)}")
    for lineno, vals in body:
        if len(vals) != d + 2:
            raise ValueError(f"{path}:{lineno}: expected {d + 2} values, got {len(vals)}")
    data = np.array([vals for _, vals in body], dtype=float).reshape(n, d + 2)
    return KeypointSet(data[:, :2], data[:, 2:])


def write_matches(path_or_file, result: MatchResult):
    lines = "".join(f"{i} {j} {c!r}\n" for i, j, c in
                    zip(result.index_a.tolist(), result.index_b.tolist(), result.confidence.tolist()))
    if hasattr(path_or_file, "write"):
        path_or_file.write(lines)
    else:
        with open(path_or_file, "w") as fh:
            fh.write(lines)


def read_matches(path) -> MatchResult:
    rows = np.array([vals for _, vals in _rows(path, 3)], dtype=float).reshape(-1, 3)
    return MatchResult(rows[:, 0].astype(int), rows[:, 1].astype(int), rows[:, 2])
