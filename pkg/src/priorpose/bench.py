"""Pose-accuracy metrics and the end-to-end ablation benchmark."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .estimator import (
    EstimatorConfig,
    InlierCountScorer,
    hypothesis_features,
    hypothesis_poses,
    rank_hypotheses,
    score_and_select,
)
from .geometry import DegenerateError, pose_error
from .matcher import MatcherConfig, match
from .prior import PriorConfig, coarse_pose_from_map, correlate_grids, noisy_oracle_prior
from .scorer import LearnedScorer, TrainConfig, label_from_errors, train
from .simulator import GridConfig, SceneConfig, generate_feature_grids, generate_pair, read_dataset

log = logging.getLogger(__name__)

SUMMARY_FILE = "summary.csv"
ERRORS_FILE = "errors.csv"
TIMING_FILE = "timing.csv"
STAGES = ("prior", "match", "estimate")


def pose_auc(errors, threshold: float) -> float:
    """Area under the recall-vs-error step curve on [0, threshold], over threshold.

    Failures are passed as +inf and never count as recalled.
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("pose_auc needs at least one error")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if np.any(np.isnan(e)) or np.any(e < 0):
        raise ValueError("errors must be non-negative (use inf for failures)")
    return float(np.mean(np.maximum(0.0, threshold - e) / threshold))


@dataclass(frozen=True)
class Variant:
    name: str
    row: str  # ablation row this mirrors
    weight: float  # epipolar penalty; 0 disables it
    scorer: str  # inlier | learned

    @property
    def needs_prior(self) -> bool:
        return self.weight > 0 or self.scorer == "learned"


VARIANTS = {
    v.name: v
    for v in (
        Variant("baseline", "matcher + RANSAC", 0.0, "inlier"),
        Variant("epi", "matcher + epipolar penalty", 1.0, "inlier"),
        Variant("prior_est", "matcher + prior scorer", 0.0, "learned"),
        Variant("full", "matcher + epipolar penalty + prior scorer", 1.0, "learned"),
    )
}


@dataclass(frozen=True)
class BenchConfig:
    pairs: int = 500
    seed: int = 0
    trials: int = 1
    variants: str = "all"  # "all" or comma-separated names
    thresholds: tuple = (5.0, 10.0, 20.0)
    dataset: str | None = None  # dataset file; None generates pairs from the scene config
    prior_source: str = "oracle"  # oracle | correlation
    weights: str | None = None  # trained scorer; None trains one on held-out seeds
    train_pairs: int = 150
    train_epochs: int = 20
    # epipolar weights of the matchers that feed training; the scorer serves
    # variants with and without the penalty, so it sees both kinds of matches
    train_weights: tuple = (0.0, 1.0)
    train_seed_offset: int = 1_000_000
    hypotheses: int = 300

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if not th or th[0] <= 0 or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be positive and strictly increasing")
        object.__setattr__(self, "thresholds", th)
        tw = tuple(float(w) for w in self.train_weights)
        if not tw or any(w < 0 for w in tw):
            raise ValueError("train_weights must be non-empty and non-negative")
        object.__setattr__(self, "train_weights", tw)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.prior_source not in ("oracle", "correlation"):
            raise ValueError(f"unknown prior source {self.prior_source!r}")
        self.variant_list()

    def variant_list(self) -> list[Variant]:
        if self.variants.strip() == "all":
            return list(VARIANTS.values())
        names = [v.strip() for v in self.variants.split(",") if v.strip()]
        unknown = [n for n in names if n not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
        return [VARIANTS[n] for n in names]


# standard coherent-outlier scene
STANDARD_SCENE = SceneConfig(points=200, uniform_fraction=0.1, coherent_fraction=0.35,
                             distractors=50, descriptor_noise=0.6)


@dataclass
class PairRecord:
    pair_id: int
    trial: int
    r_err: float
    t_err: float
    matches: int
    correct: int
    truth: int

    @property
    def error(self) -> float:
        return max(self.r_err, self.t_err)


@dataclass
class VariantReport:
    variant: Variant
    records: list = field(default_factory=list)
    seconds: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})

    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.records])

    def auc(self, thresholds) -> list[float]:
        if not self.records:
            return [math.nan for _ in thresholds]
        e = self.errors()
        return [pose_auc(e, t) for t in thresholds]

    def precision(self) -> float:
        m = sum(r.matches for r in self.records)
        return sum(r.correct for r in self.records) / m if m else 0.0

    def recall(self) -> float:
        t = sum(r.truth for r in self.records)
        return sum(r.correct for r in self.records) / t if t else 0.0

    def mean_ms(self) -> dict:
        n = max(len(self.records), 1)
        out = {s: 1000.0 * v / n for s, v in self.seconds.items()}
        out["total"] = sum(out.values())
        return out


@dataclass
class BenchReport:
    thresholds: tuple
    variants: list  # VariantReport
    config: dict = field(default_factory=dict)

    def by_name(self, name) -> VariantReport:
        for v in self.variants:
            if v.variant.name == name:
                return v
        raise KeyError(name)


# ---------------------------------------------------------------------------
# pipeline pieces


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_prior(pair, source: str, prior_cfg: PriorConfig, seed: int):
    if source == "oracle":
        return noisy_oracle_prior(pair.pose, prior_cfg, seed)
    grids = pair.grids
    if grids is None:
        grids = generate_feature_grids(pair, GridConfig(seed=seed))
    cmap = correlate_grids(*grids)
    return coarse_pose_from_map(cmap, pair.K_A, pair.K_B, replace(prior_cfg, seed=seed), grids[0].scale)


def _matched(pair, prior, mcfg: MatcherConfig):
    m = match(pair.keypoints_a, pair.keypoints_b, pair.K_A, pair.K_B, prior, mcfg)
    kA, kB = pair.keypoints_a, pair.keypoints_b
    return (m, kA.positions[m.index_a], kB.positions[m.index_b],
            kA.descriptors[m.index_a], kB.descriptors[m.index_b])


def pair_training_group(pair, prior, mcfg: MatcherConfig, ecfg: EstimatorConfig):
    """(features, labels) over one pair's top-ranked hypotheses, or None if none solve."""
    _, uvA, uvB, dA, dB = _matched(pair, prior, mcfg)
    try:
        hyps, _ = rank_hypotheses(uvA, uvB, pair.K_A, pair.K_B, ecfg)
    except DegenerateError:
        return None
    X = np.stack([hypothesis_features(h, prior, uvA, uvB, dA, dB, pair.K_A, pair.K_B, ecfg).vector()
                  for h in hyps])
    poses = hypothesis_poses(hyps, uvA, uvB, pair.K_A, pair.K_B, ecfg.threshold)
    y = np.array([0.0 if p is None else label_from_errors(*pose_error(p, pair.pose)[:2]) for p in poses])
    return X, y


def training_groups(scene: SceneConfig, count: int, seed: int, source: str, prior_cfg: PriorConfig,
                    mcfg: MatcherConfig, ecfg: EstimatorConfig):
    """Per-pair (features, labels) from simulated pairs with seeds ``seed + i``."""
    groups = []
    for i in range(count):
        pair = generate_pair(scene.replace(seed=seed + i), pair_id=i)
        prior = make_prior(pair, source, prior_cfg, _seed(seed, i, 1))
        group = pair_training_group(pair, prior, mcfg, replace(ecfg, seed=_seed(seed, i, 2)))
        if group is not None:
            groups.append(group)
    return groups


def _load_pairs(cfg: BenchConfig, scene: SceneConfig):
    if cfg.dataset is not None:
        pairs, _ = read_dataset(cfg.dataset)
        return pairs[: cfg.pairs] if cfg.pairs else pairs
    return [generate_pair(scene.replace(seed=scene.seed + cfg.seed + i), pair_id=i) for i in range(cfg.pairs)]


def run_benchmark(cfg: BenchConfig, scene: SceneConfig = STANDARD_SCENE,
                  prior_cfg: PriorConfig = PriorConfig(), matcher_cfg: MatcherConfig = MatcherConfig(),
                  estimator_cfg: EstimatorConfig | None = None, scorer=None) -> BenchReport:
    """Run every requested variant on every pair and collect errors and match statistics.

    Variants that share a matcher setting share its matches and hypothesis
    ranking; each variant is still charged the full time of its own stages.
    """
    variants = cfg.variant_list()
    ecfg = estimator_cfg or EstimatorConfig(hypotheses=cfg.hypotheses, top_k=min(100, cfg.hypotheses))
    if scorer is None and any(v.scorer == "learned" for v in variants):
        if cfg.weights is not None:
            scorer = LearnedScorer.from_file(cfg.weights)
        else:
            log.info("training scorer on %d held-out pairs", cfg.train_pairs)
            groups = []
            for w in cfg.train_weights:
                groups += training_groups(scene, cfg.train_pairs, scene.seed + cfg.seed + cfg.train_seed_offset,
                                          cfg.prior_source, prior_cfg, replace(matcher_cfg, weight=w), ecfg)
            weights, _ = train(groups, TrainConfig(epochs=cfg.train_epochs, seed=cfg.seed))
            scorer = LearnedScorer(weights)
    scorers = {"inlier": InlierCountScorer(), "learned": scorer}
    reports = [VariantReport(v) for v in variants]
    pairs = _load_pairs(cfg, scene)
    for pair in pairs:
        truth = pair.true_matches()
        for trial in range(cfg.trials):
            prior, t_prior = None, 0.0
            if any(v.needs_prior for v in variants):
                t0 = time.perf_counter()
                try:
                    prior = make_prior(pair, cfg.prior_source, prior_cfg, _seed(cfg.seed, pair.pair_id, trial, 1))
                except DegenerateError:
                    prior = None
                t_prior = time.perf_counter() - t0
            shared = {}
            for rep in reports:
                v = rep.variant
                key = v.weight if v.weight > 0 and prior is not None else 0.0
                if key not in shared:
                    t0 = time.perf_counter()
                    m, uvA, uvB, dA, dB = _matched(pair, prior if key else None, replace(matcher_cfg, weight=key))
                    t1 = time.perf_counter()
                    try:
                        ranked = rank_hypotheses(uvA, uvB, pair.K_A, pair.K_B,
                                                 replace(ecfg, seed=_seed(cfg.seed, pair.pair_id, trial, 2)))
                    except DegenerateError:
                        ranked = None
                    shared[key] = (m, uvA, uvB, dA, dB, ranked, t1 - t0, time.perf_counter() - t1)
                m, uvA, uvB, dA, dB, ranked, t_match, t_rank = shared[key]
                t0 = time.perf_counter()
                r_err = t_err = math.inf
                if ranked is not None and (v.scorer == "inlier" or prior is not None):
                    try:
                        res = score_and_select(ranked[0], ranked[1], uvA, uvB, dA, dB, prior,
                                               pair.K_A, pair.K_B, ecfg, scorers[v.scorer])
                        r_err, t_err, _ = pose_error(res.pose, pair.pose)
                    except DegenerateError:
                        pass
                t_score = time.perf_counter() - t0
                correct = len(m.pairs() & truth)
                rep.records.append(PairRecord(pair.pair_id, trial, r_err, t_err, len(m), correct, len(truth)))
                rep.seconds["prior"] += t_prior if v.needs_prior else 0.0
                rep.seconds["match"] += t_match
                rep.seconds["estimate"] += t_rank + t_score
    config = {"bench": asdict(cfg), "scene": asdict(scene), "prior": asdict(prior_cfg),
              "matcher": asdict(matcher_cfg), "estimator": asdict(ecfg)}
    return BenchReport(cfg.thresholds, reports, config)


# ---------------------------------------------------------------------------
# report files


def _auc_columns(thresholds) -> list[str]:
    return [f"auc{t:g}" for t in thresholds]


def _num(x: float) -> str:
    return repr(float(x))


def emit_report(report: BenchReport, out_dir, format: str = "csv") -> list[Path]:
    """Write the summary, per-pair error and timing files; returns their paths.

    The summary and error files depend only on the inputs and seed. Wall-clock
    timing goes to its own file so the other two are reproducible byte for byte.
    """
    if format not in ("csv", "text"):
        raise ValueError(f"unknown report format {format!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc.strerror}") from None
    aucs = _auc_columns(report.thresholds)
    paths = []
    if format == "text":
        path = out / "summary.txt"
        lines = [f"thresholds {' '.join(f'{t:g}' for t in report.thresholds)}"]
        for rep in report.variants:
            lines.append(f"[{rep.variant.name}]")
            lines.append(f"row {rep.variant.row}")
            lines.extend(f"{c} {_num(a)}" for c, a in zip(aucs, rep.auc(report.thresholds)))
            lines.append(f"precision {_num(rep.precision())}")
            lines.append(f"recall {_num(rep.recall())}")
            lines.append(f"pairs {len(rep.records)}")
        path.write_text("\n".join(lines) + "\n")
        return [path]
    with open(out / SUMMARY_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", *aucs, "precision", "recall"])
        for rep in report.variants:
            w.writerow([rep.variant.name, *map(_num, rep.auc(report.thresholds)),
                        _num(rep.precision()), _num(rep.recall())])
    paths.append(out / SUMMARY_FILE)
    with open(out / ERRORS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "pair_id", "trial", "r_err", "t_err", "error", "matches", "correct", "truth"])
        for rep in report.variants:
            for r in rep.records:
                w.writerow([rep.variant.name, r.pair_id, r.trial, _num(r.r_err), _num(r.t_err),
                            _num(r.error), r.matches, r.correct, r.truth])
    paths.append(out / ERRORS_FILE)
    with open(out / TIMING_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mean_ms", *(f"{s}_ms" for s in STAGES)])
        for rep in report.variants:
            ms = rep.mean_ms()
            w.writerow([rep.variant.name, f"{ms['total']:.3f}", *(f"{ms[s]:.3f}" for s in STAGES)])
    paths.append(out / TIMING_FILE)
    return paths


def read_report(in_dir, thresholds=(5.0, 10.0, 20.0)) -> BenchReport:
    """Rebuild a report from a per-pair error file (timing is not recovered)."""
    path = Path(in_dir) / ERRORS_FILE
    if not path.is_file():
        raise FileNotFoundError(f"no {ERRORS_FILE} in {in_dir}")
    reports: dict[str, VariantReport] = {}
    with open(path, newline="") as fh:
        rows = csv.DictReader(fh)
        for lineno, row in enumerate(rows, start=2):
            try:
                name = row["variant"]
                variant = VARIANTS.get(name, Variant(name, name, math.nan, "unknown"))
                rep = reports.setdefault(name, VariantReport(variant))
                rep.records.append(PairRecord(int(row["pair_id"]), int(row["trial"]), float(row["r_err"]),
                                              float(row["t_err"]), int(row["matches"]),
                                              int(row["correct"]), int(row["truth"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
    return BenchReport(tuple(float(t) for t in thresholds), list(reports.values()))
