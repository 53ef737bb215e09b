"""Detection metrics and memory reporting.

AUROC is rank-based (ties count one half), AP is the step-wise integral of
the precision-recall sweep, and P-F1 is the best F1 over all thresholds.
Megabyte figures are mebibytes (1 MiB = 1,048,576 bytes).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import MetricError

MIB = 1024 * 1024


def _check_binary(labels: np.ndarray) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim != 1 or not np.isin(lab, (0, 1)).all():
        raise MetricError("labels must be a flat array of 0/1 values")
    return lab.astype(np.int64)


def auroc(scores, labels) -> float:
    """Rank-based AUROC (Mann-Whitney); tied scores contribute one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    lab = _check_binary(labels)
    if s.shape != lab.shape:
        raise MetricError(f"{s.shape[0]} scores vs {lab.shape[0]} labels")
    n_pos = int(lab.sum())
    n_neg = lab.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    if np.all(s == s[0]):
        warnings.warn("all scores identical; AUROC reported as 0.5", stacklevel=2)
        return 0.5

    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[lab == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pr_sweep(scores, labels) -> tuple[np.ndarray, np.ndarray, int]:
    """Cumulative TP and FP at each distinct descending threshold."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    lab = _check_binary(labels)
    if s.shape != lab.shape:
        raise MetricError(f"{s.shape[0]} scores vs {lab.shape[0]} labels")
    n_pos = int(lab.sum())
    if n_pos == 0:
        raise MetricError("precision-recall metrics need at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    tp = np.cumsum(lab[order])
    fp = np.cumsum(1 - lab[order])
    # keep only the last index of each tied group
    keep = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    return tp[keep].astype(np.float64), fp[keep].astype(np.float64), n_pos


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall sweep."""
    tp, fp, n_pos = _pr_sweep(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(((recall - prev) * precision).sum())


def best_f1(scores, labels) -> float:
    """Maximum F1 over all score thresholds."""
    tp, fp, n_pos = _pr_sweep(scores, labels)
    fn = n_pos - tp
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1e-12)
    return float(f1.max())


@dataclass
class MetricRecord:
    category: str
    i_roc: float
    p_roc: float
    p_f1: float
    ap: float
    n_images: int
    routing_accuracy: float | None = None

    def as_row(self) -> dict:
        row = {
            "category": self.category,
            "n_images": self.n_images,
            "i_roc": self.i_roc,
            "p_roc": self.p_roc,
            "p_f1": self.p_f1,
            "ap": self.ap,
        }
        row["routing_accuracy"] = "" if self.routing_accuracy is None else self.routing_accuracy
        return row


def compute_metric_record(
    category: str,
    image_scores,
    image_labels,
    pixel_maps: list[np.ndarray],
    pixel_masks: list[np.ndarray],
    routing_accuracy: float | None = None,
) -> MetricRecord:
    """Image scores give I-ROC; pixels are pooled across the whole test set
    for P-ROC, best F1 and AP."""
    img_scores = np.asarray(image_scores, dtype=np.float64)
    img_labels = np.asarray(image_labels)
    px_scores = np.concatenate([m.reshape(-1) for m in pixel_maps])
    px_labels = np.concatenate([m.reshape(-1) for m in pixel_masks]).astype(np.int64)
    return MetricRecord(
        category=category,
        i_roc=auroc(img_scores, img_labels),
        p_roc=auroc(px_scores, px_labels),
        p_f1=best_f1(px_scores, px_labels),
        ap=average_precision(px_scores, px_labels),
        n_images=int(img_labels.size),
        routing_accuracy=routing_accuracy,
    )


def aggregate_records(records: list[MetricRecord]) -> MetricRecord:
    """Unweighted arithmetic mean over categories."""
    if not records:
        raise MetricError("cannot aggregate an empty record list")
    routing = [r.routing_accuracy for r in records if r.routing_accuracy is not None]
    return MetricRecord(
        category="mean",
        i_roc=float(np.mean([r.i_roc for r in records])),
        p_roc=float(np.mean([r.p_roc for r in records])),
        p_f1=float(np.mean([r.p_f1 for r in records])),
        ap=float(np.mean([r.ap for r in records])),
        n_images=int(sum(r.n_images for r in records)),
        routing_accuracy=float(np.mean(routing)) if routing else None,
    )


@dataclass
class MemoryReport:
    """Total model bytes split into the shared trunk and everything else."""

    total_bytes: int
    additional_bytes: int
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def total_mib(self) -> float:
        return self.total_bytes / MIB

    @property
    def additional_mib(self) -> float:
        return self.additional_bytes / MIB

    def as_dict(self) -> dict:
        return {
            "total_bytes": self.total_bytes,
            "additional_bytes": self.additional_bytes,
            "total_mb": format_mib(self.total_bytes),
            "additional_mb": format_mib(self.additional_bytes),
            "breakdown": dict(self.breakdown),
        }


def format_mib(nbytes: int) -> str:
    """Two-decimal MiB string, truncated toward zero."""
    return f"{int(nbytes / MIB * 100) / 100:.2f}"


def build_memory_report(backbone_bytes: int, components: dict[str, int]) -> MemoryReport:
    additional = sum(components.values())
    breakdown = {"backbone": backbone_bytes, **components}
    return MemoryReport(
        total_bytes=backbone_bytes + additional,
        additional_bytes=additional,
        breakdown=breakdown,
    )
