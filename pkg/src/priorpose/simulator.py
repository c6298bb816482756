"""Synthetic two-view problems with known pose, labelled correspondences and
planted feature grids.

Correspondences come in three kinds: true inliers (projections of static
scene points), uniform outliers (a descriptor repeated at two unrelated
positions, e.g. a repetitive texture) and coherent outliers (clusters moved by
a shared 2D offset, like a vehicle driving through the scene).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import CameraIntrinsics, Pose, fundamental_from_pose, sampson_distance
from .matcher import KeypointSet
from .prior import FeatureGrid

LABELS = ("inlier", "uniform", "coherent")
INLIER, UNIFORM, COHERENT = range(3)

DATASET_VERSION = "priorpose-dataset-v1"
RNG_NAME = "numpy.random.Generator(PCG64)"


class SimulationError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    points: int = 200
    near: float = 4.0
    far: float = 40.0
    motion: str = "forward"  # forward | turn-left | turn-right | custom
    forward: float = 1.0
    yaw: float = 10.0  # degrees
    custom_pose: tuple | None = None  # (qx, qy, qz, qw, tx, ty, tz)
    pixel_noise: float = 0.5
    uniform_fraction: float = 0.0
    coherent_fraction: float = 0.0
    coherent_clusters: int = 1
    coherent_radius: float = 60.0  # pixels
    coherent_offset: tuple = (40.0, 120.0)  # pixels, min/max of the shared offset
    distractors: int = 0  # unmatched keypoints per image
    descriptor_dim: int = 256
    descriptor_noise: float = 0.2
    width: int = 720
    height: int = 540
    fx: float = 600.0
    fy: float = 600.0
    cx: float | None = None
    cy: float | None = None
    with_grids: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("uniform_fraction", "coherent_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.uniform_fraction + self.coherent_fraction > 0.9:
            raise ValueError("outlier fractions may not sum above 0.9")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if self.points < 8:
            raise ValueError("point count must be at least 8")
        if self.motion not in ("forward", "turn-left", "turn-right", "custom"):
            raise ValueError(f"unknown motion pattern {self.motion!r}")
        if self.motion == "custom" and self.custom_pose is None:
            raise ValueError("custom motion needs custom_pose")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        cx = self.width / 2 if self.cx is None else self.cx
        cy = self.height / 2 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy)

    def replace(self, **kw) -> "SceneConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return SceneConfig(**d)


@dataclass(frozen=True)
class GridConfig:
    depth: int = 64
    cell: int = 8
    planted: int = 2000
    descriptor_noise: float = 0.0
    seed: int = 0


@dataclass(eq=False)
class SyntheticPair:
    pose: Pose
    K_A: CameraIntrinsics
    K_B: CameraIntrinsics
    keypoints_a: KeypointSet
    keypoints_b: KeypointSet
    correspondences: np.ndarray  # (m, 2) keypoint indices
    labels: np.ndarray  # (m,) codes into LABELS
    image_size: tuple = (720, 540)
    depth_range: tuple = (4.0, 40.0)
    pair_id: int = 0
    grids: tuple | None = None
    # position of the pose's camera B center, world scale (for grids)
    baseline: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def uvA(self) -> np.ndarray:
        return self.keypoints_a.positions[self.correspondences[:, 0]]

    @property
    def uvB(self) -> np.ndarray:
        return self.keypoints_b.positions[self.correspondences[:, 1]]

    def true_matches(self) -> set[tuple[int, int]]:
        c = self.correspondences[self.labels == INLIER]
        return set(map(tuple, c.tolist()))


def motion_pose(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Metric (R, t) for the configured motion pattern, x_B = R x_A + t."""
    if cfg.motion == "custom":
        p = np.asarray(cfg.custom_pose, dtype=float)
        R = Rotation.from_quat(p[:4]).as_matrix()
        return R, p[4:7] * cfg.forward / np.linalg.norm(p[4:7])
    if cfg.motion == "forward":
        return np.eye(3), np.array([0.0, 0.0, -cfg.forward])
    # Camera drives along a circular arc; heading turns by yaw, the chord
    # direction bisects the start and end headings.
    theta = math.radians(cfg.yaw) * (-1.0 if cfg.motion == "turn-left" else 1.0)
    heading = Rotation.from_rotvec([0.0, theta, 0.0]).as_matrix()
    center = cfg.forward * np.array([math.sin(theta / 2), 0.0, math.cos(theta / 2)])
    R = heading.T
    return R, -R @ center


def _unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _noisy_copy(rng, base, sigma):
    noisy = base + rng.normal(size=base.shape) * (sigma / math.sqrt(base.shape[1]))
    return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)


def _in_image(uv, w, h):
    return (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)


def _sample_scene(rng, K: CameraIntrinsics, cfg: SceneConfig, n: int):
    uv = rng.uniform([0, 0], [cfg.width, cfg.height], size=(n, 2))
    z = rng.uniform(cfg.near, cfg.far, size=n)
    x = K.normalize(uv)
    return np.column_stack([x * z[:, None], z])


def _project(K: CameraIntrinsics, X):
    return K.denormalize(X[:, :2] / X[:, 2:3])


def generate_pair(cfg: SceneConfig, pair_id: int = 0) -> SyntheticPair:
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics
    w, h = cfg.width, cfg.height
    R, t = motion_pose(cfg)
    pose = Pose.from_rt(R, t)

    n_coh = int(round(cfg.coherent_fraction * cfg.points))
    n_uni = int(round(cfg.uniform_fraction * cfg.points))
    n_true = cfg.points - n_coh - n_uni

    X = _sample_scene(rng, K, cfg, n_true)
    XB = X @ R.T + t
    uvA = _project(K, X)
    ok = XB[:, 2] > 1e-6
    uvB = np.full_like(uvA, -1.0)
    uvB[ok] = _project(K, XB[ok])
    uvA = uvA + rng.normal(scale=cfg.pixel_noise, size=uvA.shape)
    uvB = uvB + rng.normal(scale=cfg.pixel_noise, size=uvB.shape)
    ok &= _in_image(uvA, w, h) & _in_image(uvB, w, h)
    uvA, uvB = uvA[ok], uvB[ok]
    if len(uvA) < 8:
        raise SimulationError(f"only {len(uvA)} true inliers survive projection; config too aggressive")

    posA, posB, labels = [uvA], [uvB], [np.full(len(uvA), INLIER)]

    if n_uni:
        posA.append(rng.uniform([0, 0], [w, h], size=(n_uni, 2)))
        posB.append(rng.uniform([0, 0], [w, h], size=(n_uni, 2)))
        labels.append(np.full(n_uni, UNIFORM))

    if n_coh:
        cA, cB = _coherent_clusters(rng, cfg, K, pose, n_coh)
        posA.append(cA)
        posB.append(cB)
        labels.append(np.full(len(cA), COHERENT))

    posA = np.concatenate(posA)
    posB = np.concatenate(posB)
    labels = np.concatenate(labels)
    m = len(labels)

    D = cfg.descriptor_dim
    base = _unit_rows(rng, m, D)
    descA = _noisy_copy(rng, base, cfg.descriptor_noise)
    descB = _noisy_copy(rng, base, cfg.descriptor_noise)

    nd = cfg.distractors
    allA = np.concatenate([posA, rng.uniform([0, 0], [w, h], size=(nd, 2))])
    allB = np.concatenate([posB, rng.uniform([0, 0], [w, h], size=(nd, 2))])
    dA = np.concatenate([descA, _unit_rows(rng, nd, D)])
    dB = np.concatenate([descB, _unit_rows(rng, nd, D)])

    permA = rng.permutation(len(allA))
    permB = rng.permutation(len(allB))
    invA = np.argsort(permA)
    invB = np.argsort(permB)
    corr = np.column_stack([invA[:m], invB[:m]])

    pair = SyntheticPair(
        pose=pose,
        K_A=K,
        K_B=K,
        keypoints_a=KeypointSet(allA[permA], dA[permA]),
        keypoints_b=KeypointSet(allB[permB], dB[permB]),
        correspondences=corr,
        labels=labels,
        image_size=(w, h),
        depth_range=(cfg.near, cfg.far),
        pair_id=pair_id,
        baseline=-R.T @ t,
    )
    if cfg.with_grids:
        pair.grids = generate_feature_grids(pair, GridConfig(seed=cfg.seed))
    return pair


def _coherent_clusters(rng, cfg, K, pose, n_coh):
    """Clusters moved by a shared 2D offset whose direction is kept well away
    from the true epipolar line at the cluster, so they form a distinct model."""
    F = fundamental_from_pose(K, K, pose)
    w, h = cfg.width, cfg.height
    sizes = np.full(cfg.coherent_clusters, n_coh // cfg.coherent_clusters)
    sizes[: n_coh % cfg.coherent_clusters] += 1
    outA, outB = [], []
    for size in sizes:
        if size == 0:
            continue
        for _ in range(100):
            center = rng.uniform([cfg.coherent_radius, cfg.coherent_radius],
                                 [w - cfg.coherent_radius, h - cfg.coherent_radius])
            mag = rng.uniform(*cfg.coherent_offset)
            ang = rng.uniform(0, 2 * math.pi)
            offset = mag * np.array([math.cos(ang), math.sin(ang)])
            line = F @ np.array([center[0], center[1], 1.0])
            along = np.array([-line[1], line[0]])
            along /= np.linalg.norm(along) if np.linalg.norm(along) > 0 else 1.0
            target = center + offset
            inside = (cfg.coherent_radius <= target[0] <= w - cfg.coherent_radius
                      and cfg.coherent_radius <= target[1] <= h - cfg.coherent_radius)
            if inside and abs(np.dot(along, offset)) / mag < math.cos(math.radians(30)):
                break
        r = cfg.coherent_radius * np.sqrt(rng.uniform(size=size))
        a = rng.uniform(0, 2 * math.pi, size=size)
        pA = center + np.column_stack([r * np.cos(a), r * np.sin(a)])
        pB = pA + offset + rng.normal(scale=cfg.pixel_noise, size=pA.shape)
        outA.append(pA)
        outB.append(pB)
    return np.concatenate(outA), np.concatenate(outB)


def generate_feature_grids(pair: SyntheticPair, cfg: GridConfig = GridConfig()):
    """Feature grids at 1/cell resolution with matching unit features planted
    at cell pairs linked by the true geometry; random unit features elsewhere.

    Planted scene points are back-projected through A's cell centers, so only
    the B side carries quantization error.
    """
    rng = np.random.default_rng(cfg.seed)
    w, h = pair.image_size
    gw, gh = math.ceil(w / cfg.cell), math.ceil(h / cfg.cell)
    gA = _unit_rows(rng, gh * gw, cfg.depth)
    gB = _unit_rows(rng, gh * gw, cfg.depth)
    R, t = pair.pose.R, pair.pose.translation * np.linalg.norm(pair.baseline)
    near, far = pair.depth_range
    n = min(cfg.planted, gh * gw)
    cells = rng.choice(gh * gw, size=n, replace=False)
    depth = rng.uniform(near, far, size=n)
    rows, cols = np.divmod(cells, gw)
    uv = np.column_stack([(cols + 0.5) * cfg.cell, (rows + 0.5) * cfg.cell])
    X = np.column_stack([pair.K_A.normalize(uv) * depth[:, None], depth])
    XB = X @ R.T + t
    front = XB[:, 2] > 1e-6
    uvB = np.full_like(uv, -1.0)
    uvB[front] = _project(pair.K_B, XB[front])
    visible = front & _in_image(uvB, gw * cfg.cell, gh * cfg.cell)
    shared = _unit_rows(rng, n, cfg.depth)
    used = set()
    for i in np.flatnonzero(visible):
        cb = int(uvB[i, 1] // cfg.cell) * gw + int(uvB[i, 0] // cfg.cell)
        if cb in used:
            continue
        used.add(cb)
        gA[cells[i]] = shared[i]
        gB[cb] = shared[i]
    if cfg.descriptor_noise > 0:
        gA = _noisy_copy(rng, gA, cfg.descriptor_noise)
        gB = _noisy_copy(rng, gB, cfg.descriptor_noise)
    scale = float(cfg.cell)
    return (FeatureGrid(gA.reshape(gh, gw, cfg.depth), scale),
            FeatureGrid(gB.reshape(gh, gw, cfg.depth), scale))


def calibrated_threshold(pairs, quantile: float = 0.99) -> float:
    """Smallest Sampson threshold (pixels^2) with at least ``quantile`` of the
    true-inlier distances strictly below it, matching the strict inlier test."""
    d = []
    for p in pairs:
        F = fundamental_from_pose(p.K_A, p.K_B, p.pose)
        sel = p.labels == INLIER
        d.append(np.atleast_1d(sampson_distance(F, p.uvA[sel], p.uvB[sel])))
    d = np.sort(np.concatenate(d)) if d else np.zeros(0)
    if len(d) == 0:
        return 0.0
    k = max(math.ceil(quantile * len(d)), 1)
    return float(np.nextafter(d[k - 1], np.inf))


def generate_dataset(cfg: SceneConfig, count: int) -> list[SyntheticPair]:
    """Pairs generated with per-pair seeds ``cfg.seed + index``."""
    return [generate_pair(cfg.replace(seed=cfg.seed + i), pair_id=i) for i in range(count)]


# ---------------------------------------------------------------------------
# Dataset files


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _write_block(out, name, rows):
    rows = np.asarray(rows, dtype=float)
    out.append(f"{name} {rows.shape[0]} {rows.shape[1] if rows.ndim == 2 else 0}")
    out.extend(_fmt(r) for r in rows)


def write_dataset(path, pairs, config: SceneConfig | None = None, threshold: float | None = None):
    if threshold is None:
        threshold = calibrated_threshold(pairs)
    lines = [
        DATASET_VERSION,
        f"rng {RNG_NAME}",
        "config " + json.dumps(asdict(config) if config is not None else {}, sort_keys=True),
        f"threshold {threshold!r}",
        f"pairs {len(pairs)}",
    ]
    for p in pairs:
        lines.append(f"pair {p.pair_id}")
        lines.append("pose " + _fmt(np.concatenate([p.pose.quaternion, p.pose.translation])))
        lines.append("baseline " + _fmt(p.baseline))
        lines.append("image " + f"{p.image_size[0]} {p.image_size[1]}")
        lines.append("depth " + _fmt(p.depth_range))
        lines.append("intrinsics_a " + _fmt([p.K_A.fx, p.K_A.fy, p.K_A.cx, p.K_A.cy]))
        lines.append("intrinsics_b " + _fmt([p.K_B.fx, p.K_B.fy, p.K_B.cx, p.K_B.cy]))
        for side, kp in (("keypoints_a", p.keypoints_a), ("keypoints_b", p.keypoints_b)):
            lines.append(f"{side} {len(kp)} {kp.dim}")
            lines.extend(_fmt(np.concatenate([pos, d])) for pos, d in zip(kp.positions, kp.descriptors))
        lines.append(f"correspondences {len(p.labels)}")
        lines.extend(f"{i} {j} {LABELS[l]}" for (i, j), l in zip(p.correspondences.tolist(), p.labels.tolist()))
        if p.grids is not None:
            for side, g in zip(("grid_a", "grid_b"), p.grids):
                lines.append(f"{side} {g.height} {g.width} {g.depth} {g.scale!r}")
                lines.extend(_fmt(v) for v in g.values.reshape(-1, g.depth))
        lines.append("end")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, path):
        with open(path) as f:
            self.lines = f.read().splitlines()
        self.pos = 0
        self.pair = None

    def error(self, msg):
        where = f" (pair {self.pair})" if self.pair is not None else ""
        raise DatasetFormatError(f"line {self.pos}{where}: {msg}")

    def next(self, key=None):
        if self.pos >= len(self.lines):
            self.pos += 1
            self.error("unexpected end of file")
        line = self.lines[self.pos]
        self.pos += 1
        parts = line.split()
        if key is not None and (not parts or parts[0] != key):
            self.error(f"expected {key!r}, got {line[:40]!r}")
        return parts

    def floats(self, parts, n=None):
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            self.error(f"non-numeric value in {' '.join(parts)[:40]!r}")
        if n is not None and len(vals) != n:
            self.error(f"expected {n} values, got {len(vals)}")
        return vals

    def ints(self, parts):
        try:
            return [int(v) for v in parts]
        except ValueError:
            self.error(f"expected integers, got {' '.join(parts)[:40]!r}")


def read_dataset(path):
    """Returns (pairs, header) where header has 'config' and 'threshold'."""
    r = _Reader(path)
    head = r.next()
    if head != [DATASET_VERSION]:
        r.error(f"unsupported dataset version {' '.join(head)!r}")
    rng = r.next("rng")
    conf_line = r.lines[r.pos] if r.pos < len(r.lines) else ""
    r.next("config")
    try:
        config = json.loads(conf_line[len("config "):])
    except json.JSONDecodeError:
        r.error("config echo is not valid JSON")
    threshold = r.floats(r.next("threshold")[1:], 1)[0]
    (count,) = r.ints(r.next("pairs")[1:])
    pairs = []
    for _ in range(count):
        (pid,) = r.ints(r.next("pair")[1:])
        r.pair = pid
        pv = r.floats(r.next("pose")[1:], 7)
        baseline = r.floats(r.next("baseline")[1:], 3)
        image = r.ints(r.next("image")[1:])
        depth = r.floats(r.next("depth")[1:], 2)
        KA = CameraIntrinsics(*r.floats(r.next("intrinsics_a")[1:], 4))
        KB = CameraIntrinsics(*r.floats(r.next("intrinsics_b")[1:], 4))
        kps = []
        for side in ("keypoints_a", "keypoints_b"):
            n, d = r.ints(r.next(side)[1:])
            rows = np.array([r.floats(r.next(), d + 2) for _ in range(n)]).reshape(n, d + 2)
            try:
                kps.append(KeypointSet(rows[:, :2], rows[:, 2:]))
            except ValueError as e:
                r.error(str(e))
        (m,) = r.ints(r.next("correspondences")[1:])
        corr = np.zeros((m, 2), dtype=int)
        labels = np.zeros(m, dtype=int)
        for k in range(m):
            parts = r.next()
            if len(parts) != 3:
                r.error("correspondence record needs 'i j label'")
            corr[k] = r.ints(parts[:2])
            if parts[2] not in LABELS:
                r.error(f"correspondence record {k}: unknown label {parts[2]!r}")
            labels[k] = LABELS.index(parts[2])
        grids = None
        parts = r.next()
        if parts and parts[0] == "grid_a":
            gs = []
            for side in ("grid_a", "grid_b"):
                if side == "grid_b":
                    parts = r.next("grid_b")
                gh, gw, gd = r.ints(parts[1:4])
                scale = r.floats(parts[4:5], 1)[0]
                vals = np.array([r.floats(r.next(), gd) for _ in range(gh * gw)])
                gs.append(FeatureGrid(vals.reshape(gh, gw, gd), scale))
            grids = tuple(gs)
            parts = r.next()
        if parts != ["end"]:
            r.error("expected 'end' after pair section")
        pairs.append(SyntheticPair(
            pose=Pose(pv[:4], pv[4:]), K_A=KA, K_B=KB,
            keypoints_a=kps[0], keypoints_b=kps[1],
            correspondences=corr, labels=labels,
            image_size=tuple(image), depth_range=tuple(depth), pair_id=pid,
            grids=grids, baseline=np.array(baseline),
        ))
        r.pair = None
    return pairs, {"config": config, "threshold": threshold, "rng": " ".join(rng[1:])}
