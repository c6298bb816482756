import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priorpose.scorer import (
    DEFAULT_DIMS,
    TrainConfig,
    WeightsFormatError,
    bce_loss,
    forward,
    forward_logits,
    init_weights,
    label_from_errors,
    load_weights,
    loss_and_grad,
    read_training_file,
    save_weights,
    standardize,
    train,
    write_training_file,
)

SMALL = {"descriptor": (4, 5, 3), "prior": (6, 4, 3), "inlier": (64, 6, 4), "head": (10, 6, 1)}
TINY = {"descriptor": (4, 8), "prior": (6, 8), "inlier": (64, 8), "head": (24, 8, 1)}


def flat_grads(grads):
    return [g for name in ("descriptor", "prior", "inlier", "head") for gW, gb in grads[name] for g in (gW, gb)]


def relu_pattern(weights, X):
    """Which hidden units are active, over every ReLU layer of the network."""
    _, (caches, _) = forward_logits(weights, X, return_cache=True)
    return np.concatenate([(z > 0).ravel() for name in caches for _, z in caches[name]])


def finite_difference_check(weights, X, y, step=1e-4):
    """Worst relative error of the analytic gradient against central differences.

    Coordinates whose +-step window moves a ReLU across its kink are skipped,
    since the loss is not differentiable there.
    """
    _, grads = loss_and_grad(weights, X, y)
    base = relu_pattern(weights, X)
    worst = 0.0
    for p, g in zip(weights.parameters(), flat_grads(grads)):
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + step
            up = loss_and_grad(weights, X, y)[0]
            smooth = np.array_equal(relu_pattern(weights, X), base)
            p[idx] = keep - step
            down = loss_and_grad(weights, X, y)[0]
            smooth = smooth and np.array_equal(relu_pattern(weights, X), base)
            p[idx] = keep
            if not smooth:
                continue
            num = (up - down) / (2 * step)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-7))
    return worst


# ---------------------------------------------------------------- labels and loss


def test_label_spot_values():
    assert label_from_errors(0, 0) == 1.0
    assert label_from_errors(4, 16) == 0.5
    assert label_from_errors(30, 30) == 0.0


@given(st.floats(0, 90), st.floats(0, 90))
def test_label_range_and_clamp(r, t):
    y = label_from_errors(r, t)
    assert 0.0 <= y <= 1.0
    if (r + t) / 2 >= 20:
        assert y == 0.0


def test_bce_values():
    assert bce_loss(0.5, 0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss(1 - 1e-12, 1.0) < 1e-11


def test_loss_on_logits_matches_score_form():
    w = init_weights(3, SMALL)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(7, 74))
    y = rng.uniform(0, 1, 7)
    loss, _ = loss_and_grad(w, X, y)
    assert loss == pytest.approx(np.mean(bce_loss(forward(w, X), y)), rel=1e-12)


# ---------------------------------------------------------------- standardization


def test_standardize_examples():
    Z, full = standardize(np.array([[0.0, 3.0], [2.0, 3.0]]))
    assert full
    assert np.allclose(Z[:, 0], [-1 / (1 + 1e-6), 1 / (1 + 1e-6)], atol=1e-15)
    assert np.array_equal(Z[:, 1], [0.0, 0.0])


def test_standardize_single_row_is_flagged():
    Z, full = standardize(np.array([[1.0, 2.0]]))
    assert not full and np.array_equal(Z, [[0.0, 0.0]])


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(2, 100))
def test_standardize_moments_and_idempotence(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(k, 5)) * rng.uniform(0.1, 100, 5) + rng.normal(size=5) * 50
    Z, _ = standardize(X)
    assert np.abs(Z.mean(axis=0)).max() < 1e-9
    assert np.abs(Z.std(axis=0) - 1).max() < 1e-3
    assert np.allclose(standardize(Z)[0], Z, atol=1e-5)


# ---------------------------------------------------------------- forward


def test_zero_network_scores_half():
    w = init_weights(0)
    for p in w.parameters():
        p[...] = 0
    assert np.all(forward(w, np.ones((3, 582))) == 0.5)


def test_hand_built_network():
    # one neuron per branch, head 3 -> 1; features ordered prior | inlier | descriptor
    dims = {"descriptor": (1, 1), "prior": (1, 1), "inlier": (1, 1), "head": (3, 1)}
    w = init_weights(0, dims)
    w.layers["descriptor"] = [(np.array([[2.0]]), np.array([0.5]))]
    w.layers["prior"] = [(np.array([[-1.0]]), np.array([0.25]))]
    w.layers["inlier"] = [(np.array([[3.0]]), np.array([-1.0]))]
    w.layers["head"] = [(np.array([[0.5], [1.0], [-2.0]]), np.array([0.1]))]
    x_prior, x_inlier, x_desc = 0.1, 0.5, 0.3
    h_desc = max(2.0 * x_desc + 0.5, 0)  # 1.1
    h_prior = max(-1.0 * x_prior + 0.25, 0)  # 0.15
    h_inlier = max(3.0 * x_inlier - 1.0, 0)  # 0.5
    z = 0.5 * h_desc + 1.0 * h_prior - 2.0 * h_inlier + 0.1  # -0.2
    expected = 1 / (1 + math.exp(-z))
    got = forward(w, np.array([[x_prior, x_inlier, x_desc]]))[0]
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.45016600268752216) < 1e-12


def test_forward_range_and_purity():
    w = init_weights(1)
    before = [p.copy() for p in w.parameters()]
    X = np.random.default_rng(0).uniform(-1e3, 1e3, size=(20, 582))
    s = forward(w, X)
    assert np.all(np.isfinite(s)) and np.all((s > 0) & (s < 1) | (s == 0) | (s == 1))
    assert all(np.array_equal(a, b) for a, b in zip(before, w.parameters()))


def test_forward_width_mismatch():
    with pytest.raises(ValueError):
        forward(init_weights(0), np.zeros((2, 100)))


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w = init_weights(seed, SMALL)
    for p in w.parameters():
        p += rng.normal(scale=0.1, size=p.shape)
    X = rng.normal(size=(6, 74))
    y = rng.uniform(0, 1, 6)
    assert finite_difference_check(w, X, y) < 1e-4


# ---------------------------------------------------------------- training


def separable_groups(rng, n_groups=12, k=20):
    groups = []
    for _ in range(n_groups):
        X = rng.normal(size=(k, 74))
        X[:, :6] = np.abs(X[:, :6])
        y = (rng.random(k) < 0.5).astype(float)
        y[:2] = [0.0, 1.0]
        X[:, 0] = np.where(y == 1, 0.1, 10.0) + rng.uniform(0, 0.05, k)
        groups.append((X, y))
    return groups


def test_training_separable_set():
    groups = separable_groups(np.random.default_rng(0))
    dims = dict(TINY, descriptor=(4, 8))
    _, curve = train(groups, TrainConfig(lr_start=1e-2, lr_end=1e-3, epochs=200), dims=dims)
    assert curve[-1] < 0.1
    assert all(np.isfinite(curve))


def test_training_deterministic():
    groups = separable_groups(np.random.default_rng(1), n_groups=4)
    a, ca = train(groups, TrainConfig(epochs=3), dims=TINY)
    b, cb = train(groups, TrainConfig(epochs=3), dims=TINY)
    assert ca == cb
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_training_does_not_mutate_initial_weights():
    groups = separable_groups(np.random.default_rng(2), n_groups=2)
    w0 = init_weights(0, TINY)
    before = [p.copy() for p in w0.parameters()]
    train(groups, TrainConfig(epochs=2), weights=w0)
    assert all(np.array_equal(a, b) for a, b in zip(before, w0.parameters()))


def test_negative_prior_distances_rejected():
    with pytest.raises(ValueError):
        train([(-np.ones((3, 74)), np.ones(3))], dims=TINY)


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        train([])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-5, lr_end=1e-4)


# ---------------------------------------------------------------- persistence


def test_weights_round_trip(tmp_path):
    w = init_weights(4)
    save_weights(w, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    assert back.dims == {k: tuple(v) for k, v in DEFAULT_DIMS.items()}
    assert all(np.array_equal(a, b) for a, b in zip(w.parameters(), back.parameters()))


def test_weights_truncated(tmp_path):
    save_weights(init_weights(0, SMALL), tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "w.bin").write_bytes(raw[:-8])
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "w.bin")


def test_weights_bad_head(tmp_path):
    save_weights(init_weights(0, SMALL), tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes().replace(b"head 10 6 1", b"head 11 6 1")
    (tmp_path / "w.bin").write_bytes(raw)
    with pytest.raises(WeightsFormatError, match="head"):
        load_weights(tmp_path / "w.bin")


def test_weights_wrong_tag(tmp_path):
    (tmp_path / "w.bin").write_bytes(b"other\ndata\n")
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "w.bin")


def test_training_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    records = [(3, rng.normal(size=(4, 10)), rng.uniform(0, 1, 4)), (1, rng.normal(size=(2, 10)), np.ones(2))]
    write_training_file(tmp_path / "t.txt", records)
    back = read_training_file(tmp_path / "t.txt")
    assert [r[0] for r in back] == [3, 1]
    for (p, X, y), (q, X2, y2) in zip(records, back):
        assert np.array_equal(X, X2) and np.array_equal(y, y2)


def test_training_file_malformed(tmp_path):
    (tmp_path / "t.txt").write_text("1 0.5 1 2\nx 0.5 1 2\n")
    with pytest.raises(ValueError, match=":2:"):
        read_training_file(tmp_path / "t.txt")
