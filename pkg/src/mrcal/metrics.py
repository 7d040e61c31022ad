"""Calibration and discrimination metrics for multi-rater segmentation.

MR-ECE evaluates every voxel prediction against every annotator's label:
each voxel contributes K (confidence, rater label) pairs, pairs are binned
by confidence into M equal-width bins, and the metric is the bin-weighted
mean absolute gap between mean confidence and empirical foreground
frequency. With K=1 this reduces exactly to frequency-mode ECE.

AUC is the Mann-Whitney rank statistic against the majority vote of the
rater stack (ties to foreground). The bootstrap protocol resamples test
images with replacement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import BinaryMask, DimensionMismatch, ForegroundProbMap, RaterStack


class SingleClassReference(Exception):
    pass


class EmptyTestSet(Exception):
    pass


class InconsistentRaterCount(Exception):
    pass


@dataclass
class EvalConfig:
    num_bins: int = 15
    tau: float = 0.5
    bootstrap_n: int = 10
    bootstrap_frac: float = 0.6
    seed: int = 0
    ece_mode: str = "frequency"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0,1)")
        if not 0.0 < self.bootstrap_frac <= 1.0:
            raise ValueError("bootstrap_frac must be in (0,1]")
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if self.ece_mode not in ("frequency", "top_label"):
            raise ValueError(f"unknown ece_mode {self.ece_mode!r}")


@dataclass
class CalibrationBins:
    """M equal-width confidence bins accumulating (confidence, label) items.

    Bins are right-open except the last, so a confidence of exactly 1.0
    lands in the final bin.
    """

    num_bins: int
    counts: np.ndarray = field(default=None)
    conf_sums: np.ndarray = field(default=None)
    acc_sums: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.num_bins, dtype=np.int64)
            self.conf_sums = np.zeros(self.num_bins)
            self.acc_sums = np.zeros(self.num_bins)

    def bin_index(self, confidences: np.ndarray) -> np.ndarray:
        idx = np.floor(confidences * self.num_bins).astype(np.int64)
        return np.minimum(idx, self.num_bins - 1)

    def add(self, confidences: np.ndarray, labels: np.ndarray, weight: int = 1):
        """Accumulate items; `weight` repeats each confidence that many times
        while `labels` already carries the per-item label sum."""
        idx = self.bin_index(confidences)
        self.counts += weight * np.bincount(idx, minlength=self.num_bins)
        self.conf_sums += weight * np.bincount(
            idx, weights=confidences, minlength=self.num_bins
        )
        self.acc_sums += np.bincount(idx, weights=labels, minlength=self.num_bins)

    def merge(self, other: "CalibrationBins"):
        self.counts += other.counts
        self.conf_sums += other.conf_sums
        self.acc_sums += other.acc_sums

    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.num_bins + 1)

    def conf(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.conf_sums / self.counts, np.nan)

    def acc(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.acc_sums / self.counts, np.nan)

    def ece_value(self) -> float:
        total = self.counts.sum()
        if total == 0:
            return 0.0
        occupied = self.counts > 0
        gaps = np.abs(self.conf()[occupied] - self.acc()[occupied])
        return float((self.counts[occupied] / total * gaps).sum())


def _as_pred_array(pred) -> np.ndarray:
    if isinstance(pred, ForegroundProbMap):
        return pred.data
    return np.asarray(pred, dtype=np.float64)


def mr_ece(preds, stacks, cfg: EvalConfig):
    """Multi-rater ECE over a list of (prediction, rater stack) samples.

    Returns (value, populated CalibrationBins).
    """
    preds = [_as_pred_array(p) for p in preds]
    if len(preds) != len(stacks):
        raise ValueError("preds and stacks must have equal length")
    if not stacks:
        raise EmptyTestSet("no samples")
    k = stacks[0].num_raters
    bins = CalibrationBins(cfg.num_bins)
    for pred, stack in zip(preds, stacks):
        if stack.num_raters != k:
            raise InconsistentRaterCount(
                f"expected K={k}, got K={stack.num_raters}"
            )
        if pred.shape != stack.shape:
            raise DimensionMismatch(
                f"prediction {pred.shape} vs stack {stack.shape}"
            )
        votes = stack.as_array().sum(axis=0, dtype=np.float64)
        bins.add(pred.ravel(), votes.ravel(), weight=k)
    return bins.ece_value(), bins


def ece_single(pred, mask: BinaryMask, cfg: EvalConfig) -> float:
    """Single-rater ECE.

    frequency mode: per-bin mean prediction vs empirical foreground
    frequency (identical machinery to MR-ECE with K=1).
    top_label mode: per-bin accuracy of the thresholded prediction,
    Acc = mean I(y == I(p >= tau)).
    """
    pred = _as_pred_array(pred)
    if pred.shape != mask.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs mask {mask.shape}")
    y = mask.data.astype(np.float64)
    bins = CalibrationBins(cfg.num_bins)
    if cfg.ece_mode == "top_label":
        y_hat = (pred >= cfg.tau).astype(np.float64)
        labels = (y == y_hat).astype(np.float64)
    else:
        labels = y
    bins.add(pred.ravel(), labels.ravel())
    return bins.ece_value()


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (midrank convention)."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = cum - (counts - 1) / 2.0
    return avg_rank[inverse]


def auc(pred, reference: BinaryMask) -> float:
    """Mann-Whitney AUC: P(score of random positive > random negative),
    ties counted 0.5."""
    scores = _as_pred_array(pred).ravel()
    labels = reference.data.ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassReference("reference must contain both classes")
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def majority_mask(stack: RaterStack) -> BinaryMask:
    """Per-voxel majority vote, ties to foreground."""
    votes = stack.as_array().sum(axis=0, dtype=np.int64)
    return BinaryMask.from_array(2 * votes >= stack.num_raters)


def _pooled_metrics(preds, stacks, cfg: EvalConfig):
    value, _ = mr_ece(preds, stacks, cfg)
    scores = np.concatenate([_as_pred_array(p).ravel() for p in preds])
    labels = np.concatenate(
        [majority_mask(s).data.ravel() for s in stacks]
    ).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        auc_value = None
    else:
        ranks = _average_ranks(scores)
        u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
        auc_value = float(u / (n_pos * (labels.size - n_pos)))
    return value, auc_value


@dataclass
class MetricReport:
    mr_ece: float
    auc: float | None
    mr_ece_boot_mean: float
    mr_ece_boot_std: float
    auc_boot_mean: float | None
    auc_boot_std: float | None
    num_bootstrap: int
    resample_fraction: float
    num_bins: int
    ece_mode: str
    seed: int
    bins_csv_path: str = ""
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mr_ece": {
                "point": self.mr_ece,
                "boot_mean": self.mr_ece_boot_mean,
                "boot_std": self.mr_ece_boot_std,
            },
            "auc": {
                "point": self.auc,
                "boot_mean": self.auc_boot_mean,
                "boot_std": self.auc_boot_std,
            },
            "config": {
                "num_bootstrap": self.num_bootstrap,
                "resample_fraction": self.resample_fraction,
                "num_bins": self.num_bins,
                "ece_mode": self.ece_mode,
                "seed": self.seed,
            },
            "bins_csv_path": self.bins_csv_path,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def bootstrap_eval(preds, stacks, cfg: EvalConfig) -> MetricReport:
    """Point estimates plus image-level bootstrap mean/std of MR-ECE and AUC.

    Each replicate draws ceil(frac * n) images with replacement; stddev is
    the population form (divide by N).
    """
    if not stacks:
        raise EmptyTestSet("test set is empty")
    if cfg.bootstrap_n < 1:
        raise ValueError("bootstrap_n must be >= 1")
    preds = [_as_pred_array(p) for p in preds]
    point_ece, point_auc = _pooled_metrics(preds, stacks, cfg)

    n = len(stacks)
    draw = int(np.ceil(cfg.bootstrap_frac * n))
    rng = np.random.default_rng(cfg.seed)
    eces, aucs = [], []
    for _ in range(cfg.bootstrap_n):
        idx = rng.integers(0, n, size=draw)
        rep_preds = [preds[i] for i in idx]
        rep_stacks = [stacks[i] for i in idx]
        e, a = _pooled_metrics(rep_preds, rep_stacks, cfg)
        eces.append(e)
        aucs.append(a)

    eces = np.array(eces)
    have_auc = point_auc is not None and all(a is not None for a in aucs)
    aucs_arr = np.array(aucs, dtype=np.float64) if have_auc else None
    return MetricReport(
        mr_ece=point_ece,
        auc=point_auc,
        mr_ece_boot_mean=float(eces.mean()),
        mr_ece_boot_std=float(eces.std()),
        auc_boot_mean=float(aucs_arr.mean()) if have_auc else None,
        auc_boot_std=float(aucs_arr.std()) if have_auc else None,
        num_bootstrap=cfg.bootstrap_n,
        resample_fraction=cfg.bootstrap_frac,
        num_bins=cfg.num_bins,
        ece_mode=cfg.ece_mode,
        seed=cfg.seed,
    )


def reliability_csv(bins: CalibrationBins, path) -> None:
    """Write per-bin reliability data: bin_lo,bin_hi,count,conf,acc.

    Empty bins keep count 0 with empty conf/acc fields. Values use
    9-decimal formatting.
    """
    edges = bins.edges()
    conf = bins.conf()
    acc = bins.acc()
    lines = ["bin_lo,bin_hi,count,conf,acc"]
    for m in range(bins.num_bins):
        if bins.counts[m] > 0:
            conf_s = f"{conf[m]:.9f}"
            acc_s = f"{acc[m]:.9f}"
        else:
            conf_s = acc_s = ""
        lines.append(
            f"{edges[m]:.9f},{edges[m + 1]:.9f},{bins.counts[m]},{conf_s},{acc_s}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
