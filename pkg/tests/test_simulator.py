import math

import numpy as np
import pytest

from priorpose.geometry import (
    DegenerateError,
    fundamental_from_pose,
    pose_error,
    rotation_angle_deg,
    sampson_distance,
)
from priorpose.prior import coarse_pose_from_map, correlate_grids, robust_essential
from priorpose.simulator import (
    COHERENT,
    INLIER,
    UNIFORM,
    DatasetFormatError,
    GridConfig,
    SceneConfig,
    SimulationError,
    calibrated_threshold,
    generate_dataset,
    generate_feature_grids,
    generate_pair,
    motion_pose,
    read_dataset,
    write_dataset,
)


def residuals(pair, sel):
    F = fundamental_from_pose(pair.K_A, pair.K_B, pair.pose)
    a = np.column_stack([pair.uvA[sel], np.ones(sel.sum())])
    b = np.column_stack([pair.uvB[sel], np.ones(sel.sum())])
    return np.einsum("ni,ij,nj->n", b, F, a)


def same_pair(p, q):
    assert p.pose == q.pose and p.pair_id == q.pair_id
    assert np.array_equal(p.keypoints_a.positions, q.keypoints_a.positions)
    assert np.array_equal(p.keypoints_b.descriptors, q.keypoints_b.descriptors)
    assert np.array_equal(p.correspondences, q.correspondences)
    assert np.array_equal(p.labels, q.labels)
    assert np.array_equal(p.baseline, q.baseline)
    assert p.K_A == q.K_A and p.image_size == q.image_size and p.depth_range == q.depth_range


# ---------------------------------------------------------------- configuration


@pytest.mark.parametrize("kw", [
    dict(uniform_fraction=1.2),
    dict(uniform_fraction=0.5, coherent_fraction=0.5),
    dict(near=10, far=5),
    dict(points=7),
    dict(motion="reverse"),
    dict(motion="custom"),
])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        SceneConfig(**kw)


def test_default_intrinsics():
    K = SceneConfig().intrinsics
    assert (K.fx, K.fy, K.cx, K.cy) == (600.0, 600.0, 360.0, 270.0)


# ---------------------------------------------------------------- motion


def test_forward_motion():
    R, t = motion_pose(SceneConfig(forward=2.0))
    assert rotation_angle_deg(R) == 0.0
    # points move towards the camera: x_B = x_A - (0, 0, forward)
    assert np.array_equal(t, [0.0, 0.0, -2.0])


@pytest.mark.parametrize("motion,sign", [("turn-left", -1), ("turn-right", 1)])
@pytest.mark.parametrize("yaw", [3.0, 10.0, 25.0])
def test_turn_yaw(motion, sign, yaw):
    R, t = motion_pose(SceneConfig(motion=motion, yaw=yaw))
    assert abs(rotation_angle_deg(R) - yaw) < 1e-9
    # rotation is about the vertical axis only
    assert np.allclose(R[1], [0, 1, 0], atol=1e-15) and abs(t[1]) < 1e-15
    assert abs(np.linalg.norm(t) - 1.0) < 1e-12
    # camera B centre sits ahead of A and to the turning side
    centre = -R.T @ t
    assert centre[2] > 0 and np.sign(centre[0]) == sign


def test_custom_motion():
    cfg = SceneConfig(motion="custom", custom_pose=(0, 0, 0, 1, 3, 0, 4), forward=2.0)
    R, t = motion_pose(cfg)
    assert np.array_equal(R, np.eye(3)) and np.allclose(t, [1.2, 0, 1.6])


# ---------------------------------------------------------------- pairs


def test_zero_noise_epipolar():
    p = generate_pair(SceneConfig(seed=1, pixel_noise=0.0))
    assert np.all(p.labels == INLIER)
    assert np.abs(residuals(p, p.labels == INLIER)).max() < 1e-9


def test_inliers_within_three_sigma():
    p = generate_pair(SceneConfig(seed=2, pixel_noise=0.5, uniform_fraction=0.2, coherent_fraction=0.2))
    F = fundamental_from_pose(p.K_A, p.K_B, p.pose)
    sel = p.labels == INLIER
    # Sampson distance approximates a squared pixel distance over both images
    d = sampson_distance(F, p.uvA[sel], p.uvB[sel])
    assert np.quantile(d, 0.99) < (3 * 0.5) ** 2 * 2


def test_labels_partition_and_counts():
    cfg = SceneConfig(seed=3, points=200, uniform_fraction=0.1, coherent_fraction=0.3, distractors=25)
    p = generate_pair(cfg)
    assert set(np.unique(p.labels)) <= {INLIER, UNIFORM, COHERENT}
    assert np.count_nonzero(p.labels == UNIFORM) == 20
    assert np.count_nonzero(p.labels == COHERENT) == 60
    assert len(p.keypoints_a) == len(p.labels) + 25
    assert len(set(p.correspondences[:, 0])) == len(p.labels)
    assert len(set(p.correspondences[:, 1])) == len(p.labels)


def test_descriptors_are_unit_and_shared():
    p = generate_pair(SceneConfig(seed=4, descriptor_noise=0.0))
    dA = p.keypoints_a.descriptors[p.correspondences[:, 0]]
    dB = p.keypoints_b.descriptors[p.correspondences[:, 1]]
    assert np.allclose(np.linalg.norm(p.keypoints_a.descriptors, axis=1), 1, atol=1e-12)
    assert np.allclose(dA, dB, atol=1e-12)


def test_coherent_cluster_is_its_own_model():
    fractions_self, fractions_truth = [], []
    for seed in range(5):
        p = generate_pair(SceneConfig(seed=seed, coherent_fraction=0.4, coherent_clusters=1))
        sel = p.labels == COHERENT
        _, mask = robust_essential(p.uvA[sel], p.uvB[sel], p.K_A, p.K_B, 12.6, 500, seed=seed)
        fractions_self.append(mask.mean())
        F = fundamental_from_pose(p.K_A, p.K_B, p.pose)
        fractions_truth.append(np.mean(sampson_distance(F, p.uvA[sel], p.uvB[sel]) < 12.6))
    assert min(fractions_self) >= 0.9
    assert max(fractions_truth) < 0.1


def test_too_few_inliers():
    with pytest.raises(SimulationError):
        generate_pair(SceneConfig(points=10, uniform_fraction=0.5, coherent_fraction=0.4))


def test_pair_deterministic_bytes(tmp_path):
    cfg = SceneConfig(seed=5, uniform_fraction=0.1, coherent_fraction=0.2, distractors=10, with_grids=True)
    write_dataset(tmp_path / "a.txt", [generate_pair(cfg)], cfg)
    write_dataset(tmp_path / "b.txt", [generate_pair(cfg)], cfg)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


# ---------------------------------------------------------------- threshold and labels


def _label_rates(pairs, threshold):
    inl, uni = [], []
    for p in pairs:
        F = fundamental_from_pose(p.K_A, p.K_B, p.pose)
        d = sampson_distance(F, p.uvA, p.uvB)
        inl.append(d[p.labels == INLIER] < threshold)
        uni.append(d[p.labels == UNIFORM] >= threshold)
    return np.concatenate(inl).mean(), np.concatenate(uni).mean()


def test_truth_label_soundness():
    cfg = SceneConfig(pixel_noise=0.5, uniform_fraction=0.2)
    pairs = generate_dataset(cfg.replace(seed=1000), 20)
    threshold = calibrated_threshold(pairs)
    inl, uni = _label_rates(pairs, threshold)
    assert inl >= 0.99 and uni >= 0.95
    # on fresh pairs the quantile holds up to sampling noise
    inl, uni = _label_rates(generate_dataset(cfg.replace(seed=2000), 20), threshold)
    assert inl >= 0.98 and uni >= 0.95


def test_calibrated_threshold_is_smallest_sufficient():
    pairs = generate_dataset(SceneConfig(seed=50, points=60), 3)
    th = calibrated_threshold(pairs, 0.9)
    d = np.concatenate([sampson_distance(fundamental_from_pose(p.K_A, p.K_B, p.pose), p.uvA, p.uvB) for p in pairs])
    assert np.mean(d < th) >= 0.9
    assert np.mean(d < np.nextafter(th, 0)) < 0.9


def test_calibrated_threshold_zero_noise():
    assert calibrated_threshold(generate_dataset(SceneConfig(pixel_noise=0.0), 3)) < 1e-12
    assert calibrated_threshold([]) == 0.0


# ---------------------------------------------------------------- grids


@pytest.fixture(scope="module")
def grid_pair():
    p = generate_pair(SceneConfig(seed=6))
    return p, generate_feature_grids(p, GridConfig(seed=6))


def test_grid_dimensions(grid_pair):
    _, (gA, gB) = grid_pair
    assert (gA.height, gA.width) == (math.ceil(540 / 8), math.ceil(720 / 8)) == (gB.height, gB.width)
    assert gA.depth == 64 and gA.scale == 8.0


def test_planted_cells_recovered(grid_pair):
    p, (gA, gB) = grid_pair
    a = gA.values.reshape(-1, gA.depth)
    b = gB.values.reshape(-1, gB.depth)
    sim = a @ b.T
    planted = np.flatnonzero(sim.max(axis=1) > 1 - 1e-12)
    cmap = correlate_grids(gA, gB).reshape(-1, 5)
    target = (cmap[planted, 3] * gB.width + cmap[planted, 2]).astype(int)
    recovered = sim[planted, target] > 1 - 1e-12
    assert len(planted) > 1000 and recovered.mean() >= 0.9
    # each recovered pair of cell centres lies near its epipolar line
    F = fundamental_from_pose(p.K_A, p.K_B, p.pose)
    uvA = (cmap[planted, :2] + 0.5) * 8
    uvB = (cmap[planted, 2:4] + 0.5) * 8
    assert np.median(sampson_distance(F, uvA, uvB)) < 8.0**2


def test_random_grids_carry_no_pose(grid_pair):
    p, _ = grid_pair
    gA, gB = generate_feature_grids(p, GridConfig(planted=0, seed=1))
    try:
        pose = coarse_pose_from_map(correlate_grids(gA, gB), p.K_A, p.K_B)
    except DegenerateError:
        return
    assert pose_error(pose, p.pose)[2] > 20


# ---------------------------------------------------------------- dataset files


def test_dataset_round_trip(tmp_path):
    cfg = SceneConfig(seed=7, uniform_fraction=0.1, coherent_fraction=0.2, distractors=5, with_grids=True)
    pairs = generate_dataset(cfg, 2)
    write_dataset(tmp_path / "d.txt", pairs, cfg, threshold=3.25)
    back, header = read_dataset(tmp_path / "d.txt")
    assert header["threshold"] == 3.25 and header["config"]["seed"] == 7
    assert "PCG64" in header["rng"]
    for p, q in zip(pairs, back):
        same_pair(p, q)
        assert all(np.array_equal(g.values, h.values) for g, h in zip(p.grids, q.grids))


def test_empty_dataset(tmp_path):
    write_dataset(tmp_path / "d.txt", [])
    pairs, header = read_dataset(tmp_path / "d.txt")
    assert pairs == [] and header["threshold"] == 0.0


def test_corrupted_label_named(tmp_path):
    write_dataset(tmp_path / "d.txt", [generate_pair(SceneConfig(seed=8, points=20))])
    text = (tmp_path / "d.txt").read_text().splitlines()
    k = next(i for i, line in enumerate(text) if line.endswith(" inlier"))
    text[k] = text[k].replace("inlier", "inlyer")
    (tmp_path / "d.txt").write_text("\n".join(text) + "\n")
    with pytest.raises(DatasetFormatError, match=r"line \d+ \(pair 0\): correspondence record 0"):
        read_dataset(tmp_path / "d.txt")


def test_truncated_dataset(tmp_path):
    write_dataset(tmp_path / "d.txt", [generate_pair(SceneConfig(seed=9, points=20))])
    lines = (tmp_path / "d.txt").read_text().splitlines()
    (tmp_path / "d.txt").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(DatasetFormatError, match="line"):
        read_dataset(tmp_path / "d.txt")


def test_wrong_version(tmp_path):
    (tmp_path / "d.txt").write_text("something-else\n")
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(tmp_path / "d.txt")
