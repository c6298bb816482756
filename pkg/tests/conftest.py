import numpy as np
import pytest

from priorpose import estimator
from priorpose.geometry import CameraIntrinsics, Pose, random_rotation, random_unit_vector

HISTOGRAM_CHECKS = {"calls": 0}
_original_histogram = estimator.inlier_histogram


def _checked_histogram(*args, **kwargs):
    h = _original_histogram(*args, **kwargs)
    HISTOGRAM_CHECKS["calls"] += 1
    assert np.all(np.diff(h) >= 0), "inlier histogram is not monotone"
    assert h[0] >= 0 and h[-1] <= 1
    return h


@pytest.fixture(autouse=True)
def monotone_histograms(monkeypatch):
    """Every histogram built anywhere in a test, via the module attribute, is checked."""
    monkeypatch.setattr(estimator, "inlier_histogram", _checked_histogram)
    yield


K_DEFAULT = CameraIntrinsics(600.0, 600.0, 360.0, 270.0)


def random_pose(rng, max_angle=30.0) -> Pose:
    return Pose.from_rt(random_rotation(rng, max_angle), random_unit_vector(rng))


def scene(rng, pose: Pose, n=50, K_A=K_DEFAULT, K_B=K_DEFAULT, near=4.0, far=20.0):
    """Exact pixel projections of random points in front of both cameras."""
    out_a, out_b = [], []
    while sum(len(a) for a in out_a) < n:
        xy = rng.uniform(-0.6, 0.6, size=(4 * n, 2))
        z = rng.uniform(near, far, size=4 * n)
        XA = np.column_stack([xy * z[:, None], z])
        XB = XA @ pose.R.T + pose.t
        ok = XB[:, 2] > 0.5
        out_a.append((XA[ok, :2] / XA[ok, 2:]) * [K_A.fx, K_A.fy] + [K_A.cx, K_A.cy])
        out_b.append((XB[ok, :2] / XB[ok, 2:]) * [K_B.fx, K_B.fy] + [K_B.cx, K_B.cy])
    return np.concatenate(out_a)[:n], np.concatenate(out_b)[:n]
