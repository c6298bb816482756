"""Learned hypothesis scorer.

Three MLP branches (descriptor summary, prior distances, inlier histogram) are
concatenated and fed to a score head ending in a logistic squash. Inputs are
standardized across the top-k hypotheses of one image pair. Training uses
binary cross-entropy against soft labels derived from pose errors and Adam
with a linearly annealed learning rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimator import HISTOGRAM_BINS, PRIOR_FEATURES

FORMAT_TAG = "scorer-v1"
BRANCHES = ("descriptor", "prior", "inlier")
DEFAULT_DIMS = {
    "descriptor": (512, 256, 128, 64),
    "prior": (6, 16, 32, 64),
    "inlier": (64, 64, 128, 128),
    "head": (256, 256, 128, 64, 32, 16, 1),
}


class WeightsFormatError(ValueError):
    pass


def label_from_errors(r_err: float, t_err: float) -> float:
    """Mean angular error mapped linearly from [0, 20] degrees onto [1, 0]."""
    m = (r_err + t_err) / 2.0
    return float(np.clip(1.0 - m / 20.0, 0.0, 1.0))


def standardize(X, eps: float = 1e-6):
    """Per-column standardization over the hypotheses of one pair.

    Returns (standardized, full) where ``full`` is False when fewer than two
    rows made only mean subtraction possible.
    """
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    if len(X) < 2:
        return X - mean, False
    return (X - mean) / (X.std(axis=0) + eps), True


def transform_features(X) -> np.ndarray:
    """log1p-compress the prior Sampson distances, which span several decades."""
    X = np.array(X, dtype=float)
    if np.any(X[:, :PRIOR_FEATURES] < 0):
        raise ValueError("prior distance features must be non-negative")
    X[:, :PRIOR_FEATURES] = np.log1p(X[:, :PRIOR_FEATURES])
    return X


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def bce_loss(score, label):
    """-(y ln s + (1 - y) ln(1 - s)), elementwise."""
    s = np.asarray(score, dtype=float)
    y = np.asarray(label, dtype=float)
    with np.errstate(divide="ignore"):
        return -(y * np.log(s) + (1 - y) * np.log1p(-s))


@dataclass
class ScorerWeights:
    """Per-branch lists of (W, b) with W shaped (fan_in, fan_out)."""

    layers: dict = field(default_factory=dict)

    @property
    def dims(self) -> dict:
        return {
            name: tuple([ls[0][0].shape[0]] + [W.shape[1] for W, _ in ls])
            for name, ls in self.layers.items()
        }

    @property
    def feature_slices(self):
        p = self.layers["prior"][0][0].shape[0]
        h = self.layers["inlier"][0][0].shape[0]
        d = self.layers["descriptor"][0][0].shape[0]
        return {"prior": slice(0, p), "inlier": slice(p, p + h), "descriptor": slice(p + h, p + h + d)}

    def parameters(self):
        for name in BRANCHES + ("head",):
            for W, b in self.layers[name]:
                yield W
                yield b

    def copy(self) -> "ScorerWeights":
        return ScorerWeights({k: [(W.copy(), b.copy()) for W, b in v] for k, v in self.layers.items()})


def check_dims(dims: dict):
    missing = [n for n in BRANCHES + ("head",) if n not in dims]
    if missing:
        raise WeightsFormatError(f"missing layer group(s): {', '.join(missing)}")
    for name, d in dims.items():
        if len(d) < 2:
            raise WeightsFormatError(f"layer group {name!r} needs at least one layer")
    cat = sum(dims[b][-1] for b in BRANCHES)
    if dims["head"][0] != cat:
        raise WeightsFormatError(
            f"head input is {dims['head'][0]} but branch outputs concatenate to {cat}"
        )
    if dims["head"][-1] != 1:
        raise WeightsFormatError(f"head output must be 1, got {dims['head'][-1]}")


def init_weights(seed: int = 0, dims: dict | None = None) -> ScorerWeights:
    """Glorot-uniform weights, zero biases."""
    dims = dict(DEFAULT_DIMS if dims is None else dims)
    check_dims(dims)
    rng = np.random.default_rng(seed)
    layers = {}
    for name in BRANCHES + ("head",):
        d = dims[name]
        ls = []
        for fan_in, fan_out in zip(d[:-1], d[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            ls.append((rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)))
        layers[name] = ls
    return ScorerWeights(layers)


def _mlp_forward(x, layers, final_relu=True):
    cache = []
    for k, (W, b) in enumerate(layers):
        z = x @ W + b
        cache.append((x, z))
        last = k == len(layers) - 1
        x = z if (last and not final_relu) else np.maximum(z, 0.0)
    return x, cache


def _mlp_backward(grad, cache, layers, final_relu=True):
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        x, z = cache[k]
        W, _ = layers[k]
        last = k == len(layers) - 1
        if not (last and not final_relu):
            grad = grad * (z > 0)
        grads.append((x.T @ grad, grad.sum(axis=0)))
        grad = grad @ W.T
    return grad, grads[::-1]


def forward_logits(weights: ScorerWeights, X, return_cache: bool = False):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sl = weights.feature_slices
    width = sl["descriptor"].stop
    if X.shape[1] != width:
        raise ValueError(f"feature width {X.shape[1]} does not match network input {width}")
    outs, caches = [], {}
    for name in BRANCHES:
        o, c = _mlp_forward(X[:, sl[name]], weights.layers[name])
        outs.append(o)
        caches[name] = c
    h = np.concatenate(outs, axis=1)
    z, caches["head"] = _mlp_forward(h, weights.layers["head"], final_relu=False)
    z = z[:, 0]
    if return_cache:
        return z, (caches, [o.shape[1] for o in outs])
    return z


def forward(weights: ScorerWeights, X) -> np.ndarray:
    """Scores in (0, 1) for standardized feature rows."""
    return _sigmoid(forward_logits(weights, X))


def loss_and_grad(weights: ScorerWeights, X, labels):
    """Mean BCE over the rows and its gradient, structured like ``weights.layers``."""
    y = np.asarray(labels, dtype=float)
    z, (caches, widths) = forward_logits(weights, X, return_cache=True)
    # BCE on logits: softplus(z) - y z, identical to the score form but finite
    loss = float(np.mean(_softplus(z) - y * z))
    dz = (_sigmoid(z) - y)[:, None] / len(y)
    dh, g_head = _mlp_backward(dz, caches["head"], weights.layers["head"], final_relu=False)
    grads = {"head": g_head}
    offset = 0
    for name, w in zip(BRANCHES, widths):
        _, grads[name] = _mlp_backward(dh[:, offset:offset + w], caches[name], weights.layers[name])
        offset += w
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def prepare(X) -> np.ndarray:
    """Feature transform and per-pair standardization, as applied before forward."""
    return standardize(transform_features(X))[0]


def train(groups, cfg: TrainConfig = TrainConfig(), weights: ScorerWeights | None = None,
          dims: dict | None = None):
    """Train on a list of (features (k, F), labels (k,)) groups, one per image pair.

    Returns (weights, per-epoch mean loss). Group order is shuffled each epoch
    with a generator seeded from ``cfg.seed``.
    """
    groups = [(np.asarray(X, dtype=float), np.asarray(y, dtype=float)) for X, y in groups]
    if not groups:
        raise ValueError("training needs at least one group")
    if weights is None:
        if dims is None:
            dims = dict(DEFAULT_DIMS)
            width = groups[0][0].shape[1]
            dims["descriptor"] = (width - PRIOR_FEATURES - HISTOGRAM_BINS,) + DEFAULT_DIMS["descriptor"][1:]
        weights = init_weights(cfg.seed, dims)
    else:
        weights = weights.copy()
    prepared = [(prepare(X), y) for X, y in groups]
    params = list(weights.parameters())
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    total = cfg.epochs * len(prepared)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    step = 0
    for _ in range(cfg.epochs):
        losses = []
        for gi in rng.permutation(len(prepared)):
            X, y = prepared[gi]
            loss, grads = loss_and_grad(weights, X, y)
            losses.append(loss)
            flat = [g for name in BRANCHES + ("head",) for gW, gb in grads[name] for g in (gW, gb)]
            frac = step / max(total - 1, 1)
            lr = cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac
            step += 1
            for p, g, mi, vi in zip(params, flat, m, v):
                mi *= cfg.beta1
                mi += (1 - cfg.beta1) * g
                vi *= cfg.beta2
                vi += (1 - cfg.beta2) * g * g
                mhat = mi / (1 - cfg.beta1 ** step)
                vhat = vi / (1 - cfg.beta2 ** step)
                p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
        curve.append(float(np.mean(losses)))
    return weights, curve


def save_weights(weights: ScorerWeights, path):
    dims = weights.dims
    check_dims(dims)
    header = [FORMAT_TAG]
    for name in BRANCHES + ("head",):
        header.append(name + " " + " ".join(str(d) for d in dims[name]))
    header.append("data")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        for p in weights.parameters():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_weights(path) -> ScorerWeights:
    with open(path, "rb") as f:
        raw = f.read()
    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise WeightsFormatError("truncated header")
        line = raw[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if line == "data":
            break
        lines.append(line)
    if not lines or lines[0] != FORMAT_TAG:
        raise WeightsFormatError(f"not a {FORMAT_TAG} file")
    dims = {}
    for line in lines[1:]:
        parts = line.split()
        try:
            dims[parts[0]] = tuple(int(v) for v in parts[1:])
        except (IndexError, ValueError):
            raise WeightsFormatError(f"bad layer line {line!r}") from None
    check_dims(dims)
    need = sum(a * b + b for d in dims.values() for a, b in zip(d[:-1], d[1:])) * 8
    body = raw[pos:]
    if len(body) != need:
        raise WeightsFormatError(f"expected {need} bytes of parameters, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(float)
    layers, off = {}, 0
    for name in BRANCHES + ("head",):
        d = dims[name]
        ls = []
        for a, b in zip(d[:-1], d[1:]):
            W = flat[off:off + a * b].reshape(a, b)
            off += a * b
            bias = flat[off:off + b]
            off += b
            ls.append((W.copy(), bias.copy()))
        layers[name] = ls
    return ScorerWeights(layers)


class LearnedScorer:
    needs_features = True

    def __init__(self, weights: ScorerWeights):
        self.weights = weights

    @classmethod
    def from_file(cls, path) -> "LearnedScorer":
        return cls(load_weights(path))

    def score(self, hyps, X) -> np.ndarray:
        return forward(self.weights, prepare(X))


def write_training_file(path, records):
    """``records`` is an iterable of (pair_id, X (k, F), labels (k,))."""
    with open(path, "w") as fh:
        for pid, X, y in records:
            for row, label in zip(np.asarray(X, dtype=float), np.asarray(y, dtype=float)):
                fh.write(f"{int(pid)} {float(label)!r} " + " ".join(repr(float(v)) for v in row) + "\n")


def read_training_file(path):
    """Inverse of write_training_file; returns groups ordered by first appearance."""
    groups: dict[int, tuple[list, list]] = {}
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                pid, label, feats = int(parts[0]), float(parts[1]), [float(v) for v in parts[2:]]
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed record") from None
            if width is None:
                width = len(feats)
            if len(feats) != width or width == 0:
                raise ValueError(f"{path}:{lineno}: expected {width} features, got {len(feats)}")
            X, y = groups.setdefault(pid, ([], []))
            X.append(feats)
            y.append(label)
    return [(pid, np.array(X), np.array(y)) for pid, (X, y) in groups.items()]
