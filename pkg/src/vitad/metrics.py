"""Image- and pixel-level evaluation metrics and their mAD mean.

All metrics live in [0, 1] internally; the x100 one-decimal rendering is
the report writer's business, not this module's.

auroc is the Mann-Whitney pair statistic (ties credited 0.5), identical
to trapezoidal ROC integration but without a threshold grid. AP walks
ranks in descending score order with tied scores grouped, so precision
is only evaluated at group boundaries. f1_max sweeps the distinct
scores as thresholds for the predictor score >= t. aupro builds the
per-region-overlap curve against the pooled false-positive rate over an
exact threshold sweep (or an optional fixed-bin sweep for large inputs),
then integrates to fpr_cap and normalizes by it.

Metrics undefined on a degenerate split (one class only, no anomalous
pixels) are reported as None and excluded from averages, with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np
from scipy.ndimage import label as cc_label
from scipy.stats import rankdata

EIGHT_CONN = np.ones((3, 3), dtype=int)


class UndefinedMetric(ValueError):
    """Raised when a metric's preconditions (both classes present etc.) fail."""


def _as_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores/labels lengths differ: {s.size} vs {y.size}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    s, y = _as_scores(scores, labels)
    npos = int(y.sum())
    nneg = y.size - npos
    if npos == 0 or nneg == 0:
        raise UndefinedMetric("auroc needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def average_precision(scores, labels) -> float:
    s, y = _as_scores(scores, labels)
    npos = int(y.sum())
    if npos == 0:
        raise UndefinedMetric("average_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # walk distinct-score groups: precision at each group boundary
    boundaries = np.flatnonzero(np.diff(s)) + 1
    ends = np.append(boundaries, s.size)
    tp = np.cumsum(y)
    total = 0.0
    start = 0
    for end in ends:
        pos_in_group = tp[end - 1] - (tp[start - 1] if start else 0)
        if pos_in_group:
            total += pos_in_group * (tp[end - 1] / end)
        start = end
    return float(total / npos)


def f1_max(scores, labels) -> float:
    s, y = _as_scores(scores, labels)
    npos = int(y.sum())
    if npos == 0:
        raise UndefinedMetric("f1_max needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.append(np.flatnonzero(np.diff(s)) + 1, s.size)
    tp = np.cumsum(y)[ends - 1]
    predicted = ends.astype(np.float64)
    precision = tp / predicted
    recall = tp / npos
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return float(f1.max())


def _region_curves(maps, masks):
    """Sorted per-region score arrays plus the pooled normal-pixel scores."""
    regions: list[np.ndarray] = []
    normals: list[np.ndarray] = []
    for m, gt in zip(maps, masks):
        m = np.asarray(m, np.float64)
        gt = np.asarray(gt).astype(bool)
        if m.shape != gt.shape:
            raise ValueError(f"map/mask shapes differ: {m.shape} vs {gt.shape}")
        normals.append(m[~gt])
        if gt.any():
            lab, n = cc_label(gt, structure=EIGHT_CONN)
            for r in range(1, n + 1):
                regions.append(np.sort(m[lab == r]))
    return regions, np.sort(np.concatenate(normals))


def aupro(maps, masks, fpr_cap: float = 0.3, bins: int | None = None) -> float:
    """Area under the per-region-overlap vs pooled-FPR curve up to fpr_cap.

    bins=None sweeps every distinct prediction value (exact); an integer
    selects that many evenly spaced thresholds instead, for large inputs.
    """
    if not (0.0 < fpr_cap <= 1.0):
        raise ValueError("fpr_cap must lie in (0, 1]")
    if len(maps) != len(masks):
        raise ValueError("maps and masks counts differ")
    regions, normal_scores = _region_curves(maps, masks)
    if not regions:
        raise UndefinedMetric("aupro needs at least one anomalous region")
    if bins is None:
        thresholds = np.unique(
            np.concatenate([normal_scores] + regions)
        )[::-1]
    else:
        all_scores = np.concatenate([normal_scores] + regions)
        thresholds = np.linspace(all_scores.max(), all_scores.min(), bins)
    # descending thresholds: fpr/pro both grow monotonically
    n_norm = normal_scores.size
    fpr = 1.0 - np.searchsorted(normal_scores, thresholds, side="left") / n_norm
    pro = np.zeros_like(thresholds)
    for r in regions:
        pro += 1.0 - np.searchsorted(r, thresholds, side="left") / r.size
    pro /= len(regions)
    fpr = np.concatenate([[0.0], fpr])
    pro = np.concatenate([[0.0 if fpr[1] > 0 else pro[0]], pro])
    return _clipped_area(fpr, pro, fpr_cap) / fpr_cap


def _clipped_area(fpr: np.ndarray, pro: np.ndarray, cap: float) -> float:
    """Trapezoid over fpr in [0, cap] with linear interpolation at the cap."""
    area = 0.0
    for i in range(1, fpr.size):
        x0, x1 = fpr[i - 1], fpr[i]
        y0, y1 = pro[i - 1], pro[i]
        if x1 <= x0:
            continue
        if x0 >= cap:
            break
        if x1 > cap:
            y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            x1 = cap
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area


_METRIC_FIELDS = (
    "image_auroc",
    "image_ap",
    "image_f1max",
    "pixel_auroc",
    "pixel_ap",
    "pixel_f1max",
    "pixel_aupro",
)


@dataclass
class MetricReport:
    image_auroc: float | None = None
    image_ap: float | None = None
    image_f1max: float | None = None
    pixel_auroc: float | None = None
    pixel_ap: float | None = None
    pixel_f1max: float | None = None
    pixel_aupro: float | None = None

    @property
    def mad(self) -> float | None:
        values = [getattr(self, f) for f in _METRIC_FIELDS]
        present = [v for v in values if v is not None]
        if not present:
            return None
        if len(present) < len(values):
            warnings.warn(
                "mAD computed over a partial report "
                f"({len(present)}/{len(values)} metrics present)",
                stacklevel=2,
            )
        return float(np.mean(present))

    def as_dict(self) -> dict[str, float | None]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["mad"] = self.mad
        return out


def aggregate_mad(values) -> float:
    vals = [v for v in values]
    if len(vals) != 7 or any(v is None for v in vals):
        raise ValueError(f"aggregate_mad needs all seven metrics, got {vals}")
    return float(np.mean(np.asarray(vals, np.float64)))


def mean_report(reports: list[MetricReport]) -> MetricReport:
    """Per-field average over classes, skipping absent entries."""
    agg = {}
    for name in _METRIC_FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if len(vals) < len(reports):
            warnings.warn(f"{name} absent for some classes; mean over the rest")
        agg[name] = float(np.mean(vals)) if vals else None
    return MetricReport(**agg)
