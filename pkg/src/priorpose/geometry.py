"""Two-view epipolar geometry: poses, fundamental/essential matrices, Sampson
distance, essential decomposition and cheirality.

Pose convention used throughout the package: a point ``X_A`` expressed in the
frame of camera A maps to ``X_B = R @ X_A + t`` in camera B.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


class DegenerateError(ValueError):
    """Raised when a geometric configuration cannot yield a valid model."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def normalize(self, uv) -> np.ndarray:
        """Pixel coordinates (n, 2) to normalized camera coordinates (n, 2)."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def denormalize(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack([xy[..., 0] * self.fx + self.cx, xy[..., 1] * self.fy + self.cy], axis=-1)


@dataclass(frozen=True, eq=False)
class Pose:
    """Relative pose. Quaternion is scalar-last with a non-negative scalar part;
    translation is a unit direction."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        qn, tn = np.linalg.norm(q), np.linalg.norm(t)
        if qn == 0 or tn == 0:
            raise ValueError("pose needs a nonzero quaternion and translation")
        q = q / qn
        if q[3] < 0 or (q[3] == 0 and _first_nonzero(q) < 0):
            q = -q
        q.flags.writeable = False
        t = t / tn
        t.flags.writeable = False
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat(), t)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternion).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_rt(R.T, -R.T @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.quaternion, other.quaternion)
            and np.array_equal(self.translation, other.translation)
        )

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quaternion)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"Pose(q=[{q}], t=[{t}])"


def _first_nonzero(v):
    nz = v[v != 0]
    return nz[0] if len(nz) else 0.0


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def frobenius_normalize(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    n = np.linalg.norm(M)
    if n == 0:
        raise DegenerateError("zero matrix cannot be normalized")
    return M / n


def essential_from_pose(pose: Pose) -> np.ndarray:
    return skew(pose.translation) @ pose.R


def fundamental_from_essential(E, K_A: CameraIntrinsics, K_B: CameraIntrinsics) -> np.ndarray:
    """F = K_B^-T E K_A^-1, Frobenius-normalized."""
    return frobenius_normalize(K_B.K_inv.T @ np.asarray(E, dtype=float) @ K_A.K_inv)


def fundamental_from_pose(K_A: CameraIntrinsics, K_B: CameraIntrinsics, pose: Pose) -> np.ndarray:
    return fundamental_from_essential(essential_from_pose(pose), K_A, K_B)


def homogeneous(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] == 3:
        return p
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def epipolar_line(F, p, direction: str = "A->B") -> np.ndarray:
    """Unit-norm epipolar line(s) in the other image.

    ``direction="A->B"`` maps a point of image A to a line in image B via F;
    ``"B->A"`` uses F^T. ``p`` may be a single point or an (n, 2|3) array.
    """
    F = np.asarray(F, dtype=float)
    if direction == "A->B":
        M = F
    elif direction == "B->A":
        M = F.T
    else:
        raise ValueError(f"unknown direction {direction!r}")
    ph = homogeneous(p)
    lines = ph @ M.T
    norms = np.linalg.norm(lines, axis=-1, keepdims=True)
    return lines / np.where(norms == 0, 1.0, norms)


def sampson_distance(F, pA, pB) -> np.ndarray | float:
    """Squared first-order geometric error of correspondences under F.

    Vectorized over leading axes of ``pA``/``pB`` (pixel points, 2 or 3
    components). Returns ``inf`` where the denominator vanishes.
    """
    F = np.asarray(F, dtype=float)
    a = homogeneous(pA)
    b = homogeneous(pB)
    Fa = a @ F.T
    Ftb = b @ F
    num = np.sum(b * Fa, axis=-1) ** 2
    den = Fa[..., 0] ** 2 + Fa[..., 1] ** 2 + Ftb[..., 0] ** 2 + Ftb[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return float(d) if d.ndim == 0 else d


def batch_sampson(F, pA, pB) -> np.ndarray:
    """Sampson distances for a stack of models: F (m, 3, 3) against n points -> (m, n)."""
    a = homogeneous(pA)
    b = homogeneous(pB)
    Fa = np.einsum("mij,nj->mni", F, a)
    Ftb = np.einsum("mji,nj->mni", F, b)
    num = np.einsum("nj,mnj->mn", b, Fa) ** 2
    den = Fa[..., 0] ** 2 + Fa[..., 1] ** 2 + Ftb[..., 0] ** 2 + Ftb[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)


_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def decompose_essential(E) -> list[Pose]:
    """The four (R, +-t) candidates of an essential matrix."""
    E = np.asarray(E, dtype=float)
    U, s, Vt = np.linalg.svd(E)
    if s[0] == 0 or s[1] / s[0] < 1e-9:
        raise DegenerateError(f"essential matrix has rank < 2 (singular values {s})")
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2]
    return [Pose.from_rt(R1, t), Pose.from_rt(R1, -t), Pose.from_rt(R2, t), Pose.from_rt(R2, -t)]


def triangulate(pose: Pose, xA, xB) -> np.ndarray:
    """Linear (DLT) triangulation from normalized coordinates; returns (n, 4) homogeneous points."""
    xA = np.atleast_2d(np.asarray(xA, dtype=float))
    xB = np.atleast_2d(np.asarray(xB, dtype=float))
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([pose.R, pose.translation[:, None]])
    A = np.stack(
        [
            xA[:, 0:1] * P1[2] - P1[0],
            xA[:, 1:2] * P1[2] - P1[1],
            xB[:, 0:1] * P2[2] - P2[0],
            xB[:, 1:2] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, _, Vt = np.linalg.svd(A)
    return Vt[:, -1, :]


def positive_depth_count(pose: Pose, xA, xB) -> int:
    X = triangulate(pose, xA, xB)
    # Sign of w matters for homogeneous points; compare depth sign against w.
    zA = X[:, 2] * X[:, 3]
    zB = (X[:, :3] @ pose.R[2] + pose.translation[2] * X[:, 3]) * X[:, 3]
    return int(np.count_nonzero((zA > 0) & (zB > 0)))


def cheirality_select(candidates, uvA, uvB, K_A: CameraIntrinsics, K_B: CameraIntrinsics) -> Pose:
    """Pick the candidate with the most points in front of both cameras.

    ``uvA``/``uvB`` are pixel coordinates (n, 2). Ties go to the earliest candidate.
    """
    uvA = np.atleast_2d(np.asarray(uvA, dtype=float))
    uvB = np.atleast_2d(np.asarray(uvB, dtype=float))
    if len(uvA) == 0:
        raise DegenerateError("cheirality check needs at least one correspondence")
    xA, xB = K_A.normalize(uvA), K_B.normalize(uvB)
    counts = [positive_depth_count(c, xA, xB) for c in candidates]
    best = int(np.argmax(counts))
    if counts[best] == 0:
        raise DegenerateError("no candidate places any point in front of both cameras")
    return candidates[best]


def rotation_angle_deg(R) -> float:
    return float(np.degrees(Rotation.from_matrix(R).magnitude()))


def angle_between_deg(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float, float]:
    """(rotation error, translation direction error, max of both), in degrees."""
    r_err = float(np.degrees((Rotation.from_quat(estimate.quaternion).inv() * Rotation.from_quat(truth.quaternion)).magnitude()))
    t_err = angle_between_deg(estimate.translation, truth.translation)
    return r_err, t_err, max(r_err, t_err)


def random_rotation(rng, max_angle_deg: float | None = None) -> np.ndarray:
    if max_angle_deg is None:
        return Rotation.random(random_state=rng).as_matrix()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0, max_angle_deg))
    return Rotation.from_rotvec(axis * angle).as_matrix()


def random_unit_vector(rng, dim: int = 3) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)
