"""Coarse motion prior: dense grid correlation and a robust pose fit over the
resulting correspondence map, or a noisy oracle for controlled experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .geometry import (
    CameraIntrinsics,
    DegenerateError,
    Pose,
    batch_sampson,
    cheirality_select,
    decompose_essential,
    essential_from_pose,
    fundamental_from_essential,
    random_unit_vector,
    skew,
)


@dataclass
class FeatureGrid:
    """Row-major grid of unit feature vectors, shape (height, width, depth)."""

    values: np.ndarray
    scale: float = 8.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or 0 in self.values.shape:
            raise ValueError(f"grid values must be a non-empty (h, w, d) array, got {self.values.shape}")
        norms = np.linalg.norm(self.values, axis=2)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("grid features must be L2-normalized")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PriorConfig:
    source: str = "oracle"  # "oracle" | "correlation"
    rotation_noise: float = 2.0  # degrees
    translation_noise: float = 2.0  # degrees
    top_fraction: float = 0.25
    max_iterations: int = 1000
    correlation_floor: float = 0.2
    inlier_threshold: float = 16.0  # Sampson distance, pixels^2
    refine: bool = True  # robust nonlinear polish after the linear fit
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("oracle", "correlation"):
            raise ValueError(f"unknown prior source {self.source!r}")
        if self.rotation_noise < 0 or self.translation_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")


def correlate_grids(gA: FeatureGrid, gB: FeatureGrid, chunk: int = 1024) -> np.ndarray:
    """For each cell of A, the best-correlated cell of B.

    Returns a (h_A, w_A, 5) map of ``[u, v, u', v', r]`` with u the column and
    v the row index. Ties go to the lowest row-major index in B.
    """
    if gA.depth != gB.depth:
        raise ValueError(f"grid depth mismatch: {gA.depth} vs {gB.depth}")
    a = gA.values.reshape(-1, gA.depth)
    b = gB.values.reshape(-1, gB.depth)
    best = np.empty(len(a), dtype=int)
    r = np.empty(len(a))
    for start in range(0, len(a), chunk):
        corr = a[start:start + chunk] @ b.T
        idx = np.argmax(corr, axis=1)
        best[start:start + chunk] = idx
        r[start:start + chunk] = corr[np.arange(len(idx)), idx]
    rows, cols = np.divmod(np.arange(len(a)), gA.width)
    rows_b, cols_b = np.divmod(best, gB.width)
    out = np.stack([cols, rows, cols_b, rows_b, np.clip(r, -1.0, 1.0)], axis=1).astype(float)
    return out.reshape(gA.height, gA.width, 5)


def _hartley(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return T


def _project_essential(E):
    U, s, Vt = np.linalg.svd(E)
    sigma = (s[..., 0] + s[..., 1]) / 2
    D = np.zeros(E.shape[:-2] + (3,))
    D[..., 0] = sigma
    D[..., 1] = sigma
    return (U * D[..., None, :]) @ Vt


def eight_point(xA, xB) -> np.ndarray:
    """Normalized linear essential estimate from >= 8 normalized-coordinate pairs.

    Accepts (n, 2) inputs or stacks (m, n, 2); returns (3, 3) or (m, 3, 3),
    projected onto the essential manifold and Frobenius-normalized.
    """
    xA = np.asarray(xA, dtype=float)
    xB = np.asarray(xB, dtype=float)
    single = xA.ndim == 2
    if single:
        xA, xB = xA[None], xB[None]
    if xA.shape[1] < 8:
        raise DegenerateError("eight-point solve needs at least 8 correspondences")
    Es = []
    for a, b in zip(xA, xB):
        TA, TB = _hartley(a), _hartley(b)
        ah = np.column_stack([a, np.ones(len(a))]) @ TA.T
        bh = np.column_stack([b, np.ones(len(b))]) @ TB.T
        A = (bh[:, :, None] * ah[:, None, :]).reshape(len(a), 9)
        _, _, Vt = np.linalg.svd(A)
        Es.append(TB.T @ Vt[-1].reshape(3, 3) @ TA)
    E = _project_essential(np.array(Es))
    E /= np.linalg.norm(E, axis=(1, 2), keepdims=True)
    return E[0] if single else E


def _count(E, uvA, uvB, K_A, K_B, threshold):
    F = fundamental_from_essential(E, K_A, K_B)
    mask = batch_sampson(F[None], uvA, uvB)[0] < threshold
    return int(mask.sum()), mask


def robust_essential(uvA, uvB, K_A: CameraIntrinsics, K_B: CameraIntrinsics,
                     threshold: float, max_iterations: int, seed: int, refits: int = 5):
    """RANSAC over eight-point samples with local optimization: every sample
    that beats the best count is refit by least squares on its inliers until
    the count stops growing. Runs the full iteration budget; returns (E, mask).
    """
    uvA = np.asarray(uvA, dtype=float)
    uvB = np.asarray(uvB, dtype=float)
    n = len(uvA)
    if n < 8:
        raise DegenerateError(f"need at least 8 correspondences, got {n}")
    xA, xB = K_A.normalize(uvA), K_B.normalize(uvB)
    rng = np.random.default_rng(seed)
    best_count, best_E, best_mask = -1, None, None
    done, batch = 0, 64
    while done < max_iterations:
        m = min(batch, max_iterations - done)
        idx = np.argpartition(rng.random((m, n)), 8, axis=1)[:, :8]
        Es = eight_point(xA[idx], xB[idx])
        Fs = K_B.K_inv.T @ Es @ K_A.K_inv
        counts = np.count_nonzero(batch_sampson(Fs, uvA, uvB) < threshold, axis=1)
        for k in np.argsort(-counts, kind="stable"):
            if counts[k] <= best_count:
                break
            E = Es[k]
            c, mask = _count(E, uvA, uvB, K_A, K_B, threshold)
            for _ in range(refits):
                if c < 8:
                    break
                E2 = eight_point(xA[mask], xB[mask])
                c2, mask2 = _count(E2, uvA, uvB, K_A, K_B, threshold)
                if c2 <= c:
                    break
                E, c, mask = E2, c2, mask2
            if c > best_count:
                best_count, best_E, best_mask = c, E, mask
        done += m
    return best_E, best_mask


def _signed_sampson(params, uvA, uvB, K_A, K_B):
    R = Rotation.from_rotvec(params[:3]).as_matrix()
    t = params[3:] / np.linalg.norm(params[3:])
    F = K_B.K_inv.T @ skew(t) @ R @ K_A.K_inv
    Fa = uvA @ F[:, :2].T + F[:, 2]
    Ftb = uvB @ F[:2, :] + F[2, :]
    r = np.sum(uvB * Fa[:, :2], axis=1) + Fa[:, 2]
    return r / np.sqrt(Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2)


def refine_pose(pose: Pose, uvA, uvB, K_A: CameraIntrinsics, K_B: CameraIntrinsics,
                scale: float, threshold: float) -> Pose:
    """Nonlinear polish of a pose over all correspondences under a Cauchy loss
    on the signed Sampson residual (pixels), then a fresh cheirality check."""
    uvA = np.asarray(uvA, dtype=float)
    uvB = np.asarray(uvB, dtype=float)
    x0 = np.concatenate([Rotation.from_quat(pose.quaternion).as_rotvec(), pose.translation])
    fit = least_squares(_signed_sampson, x0, args=(uvA, uvB, K_A, K_B), loss="cauchy", f_scale=scale)
    if not np.all(np.isfinite(fit.x)) or np.linalg.norm(fit.x[3:]) == 0:
        return pose
    refined = Pose(Rotation.from_rotvec(fit.x[:3]).as_quat(), fit.x[3:])
    E = essential_from_pose(refined)
    _, mask = _count(E, uvA, uvB, K_A, K_B, threshold)
    use = mask if mask.any() else np.ones(len(uvA), dtype=bool)
    return cheirality_select(decompose_essential(E), uvA[use], uvB[use], K_A, K_B)


def coarse_pose_from_map(cmap, K_A: CameraIntrinsics, K_B: CameraIntrinsics,
                         cfg: PriorConfig = PriorConfig(), scale: float = 8.0) -> Pose:
    """Coarse relative pose from the highest-correlation cells of a correspondence map."""
    flat = np.asarray(cmap, dtype=float).reshape(-1, 5)
    k = int(np.ceil(cfg.top_fraction * len(flat)))
    order = np.argsort(-flat[:, 4], kind="stable")[:k]
    top = flat[order]
    top = top[top[:, 4] >= cfg.correlation_floor]
    if len(top) < 8:
        raise DegenerateError(
            f"only {len(top)} cells above correlation floor {cfg.correlation_floor}; prior unavailable"
        )
    uvA = (top[:, 0:2] + 0.5) * scale
    uvB = (top[:, 2:4] + 0.5) * scale
    E, mask = robust_essential(uvA, uvB, K_A, K_B, cfg.inlier_threshold, cfg.max_iterations, cfg.seed)
    use = mask if mask.sum() >= 1 else np.ones(len(uvA), dtype=bool)
    pose = cheirality_select(decompose_essential(E), uvA[use], uvB[use], K_A, K_B)
    if not cfg.refine:
        return pose
    # cell-center quantization noise: uniform over a cell, std = cell / sqrt(12)
    return refine_pose(pose, uvA, uvB, K_A, K_B, scale / np.sqrt(12.0), cfg.inlier_threshold)


def noisy_oracle_prior(truth: Pose, cfg: PriorConfig, seed: int) -> Pose:
    """Ground truth perturbed by half-normal rotation and translation-direction noise."""
    rng = np.random.default_rng(seed)
    r_angle = abs(rng.normal(0.0, cfg.rotation_noise)) if cfg.rotation_noise > 0 else 0.0
    r_axis = random_unit_vector(rng)
    t_angle = abs(rng.normal(0.0, cfg.translation_noise)) if cfg.translation_noise > 0 else 0.0
    t_dir = random_unit_vector(rng)
    if r_angle == 0 and t_angle == 0:
        return truth
    q = truth.quaternion
    if r_angle:
        q = (Rotation.from_rotvec(np.radians(r_angle) * r_axis) * Rotation.from_quat(q)).as_quat()
    t = truth.translation
    if t_angle:
        ortho = t_dir - np.dot(t_dir, t) * t
        ortho /= np.linalg.norm(ortho)
        a = np.radians(t_angle)
        t = np.cos(a) * t + np.sin(a) * ortho
    return Pose(q, t)


def write_grid(path, grid: FeatureGrid):
    with open(path, "w") as fh:
        fh.write(f"{grid.height} {grid.width} {grid.depth} {grid.scale!r}\n")
        for row in grid.values.reshape(-1, grid.depth):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_grid(path) -> FeatureGrid:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    try:
        h, w, d = (int(v) for v in lines[0].split()[:3])
        scale = float(lines[0].split()[3])
    except (IndexError, ValueError):
        raise ValueError(f"{path}:1: header must be 'h w d scale'") from None
    if len(lines) - 1 != h * w:
        raise ValueError(f"{path}: expected {h * w} cells, found {len(lines) - 1}")
    try:
        values = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    except ValueError:
        raise ValueError(f"{path}: non-numeric cell value") from None
    if values.shape != (h * w, d):
        raise ValueError(f"{path}: every cell must have {d} values")
    return FeatureGrid(values.reshape(h, w, d), scale)
