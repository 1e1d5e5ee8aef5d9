"""Saliency metrics (S-measure, mean F-measure, mean E-measure, MAE) and uncertainty MAE.

Threshold sweeps binarize ``pred > t`` for the 256 thresholds ``t = k / 256``,
k = 0..255, so a binary prediction equal to the ground truth scores 1 at
every threshold.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import InvalidInputError, MissingPredictionError
from .kernels import threshold_counts
from .uncertainty import gt_predictive_uncertainty, load_uncertainty

BETA2 = 0.3
NUM_THRESHOLDS = 256
THRESHOLDS = np.arange(NUM_THRESHOLDS, dtype=np.float64) / NUM_THRESHOLDS
DEGENERATE_TOL = 0.05
ALPHA = 0.5
_EPS = np.finfo(np.float64).eps

CSV_FIELDS = ("id", "s_measure", "f_measure", "e_measure", "mae", "uncertainty_mae")
AGGREGATE_ID = "__all__"
TABLE_COLUMNS = (("s_measure", "S_alpha ↑"), ("f_measure", "F_beta ↑"), ("e_measure", "E_xi ↑"), ("mae", "M ↓"))


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return pred, gt


def _binary_gt(gt):
    if not np.isin(gt, (0, 1)).all():
        raise InvalidInputError("ground truth must be binary")
    return gt.astype(np.uint8)


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt.astype(np.float64)).mean())


def uncertainty_mae(pred_unc, gt_unc) -> float:
    pred_unc, gt_unc = _pair(pred_unc, gt_unc)
    return float(np.abs(pred_unc - gt_unc.astype(np.float64)).mean())


def fmeasure_curve(pred, gt, beta2: float = BETA2) -> np.ndarray:
    """F-measure at each of the 256 thresholds; undefined precision or recall counts as 0."""
    pred, gt = _pair(pred, gt)
    gt = _binary_gt(gt)
    tp, fp = threshold_counts(pred, gt, THRESHOLDS)
    tp = tp.astype(np.float64)
    n_pos = float(gt.sum())
    n_pred = tp + fp
    precision = np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0)
    recall = tp / n_pos if n_pos > 0 else np.zeros_like(tp)
    denom = beta2 * precision + recall
    return np.divide((1 + beta2) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def mean_fmeasure(pred, gt, beta2: float = BETA2) -> float:
    return float(fmeasure_curve(pred, gt, beta2).mean())


def _degenerate_score(pred, gt_value: int, raw: float) -> float:
    if abs(pred.mean() - gt_value) <= DEGENERATE_TOL:
        return 1.0
    return float(raw)


# --------------------------------------------------------------------------
# E-measure
# --------------------------------------------------------------------------


def emeasure_curve(pred, gt) -> np.ndarray:
    """Enhanced-alignment score at each threshold (non-degenerate ground truth)."""
    pred, gt = _pair(pred, gt)
    gt = _binary_gt(gt)
    tp, fp = threshold_counts(pred, gt, THRESHOLDS)
    n = float(gt.size)
    g = float(gt.sum())
    tp, fp = tp.astype(np.float64), fp.astype(np.float64)
    fn = g - tp
    tn = n - g - fp
    mu_fm = (tp + fp) / n
    mu_gt = g / n

    def enhanced(fm_value, gt_value):
        a_fm = fm_value - mu_fm
        a_gt = gt_value - mu_gt
        xi = 2.0 * a_fm * a_gt / (a_fm**2 + a_gt**2 + _EPS)
        return (1.0 + xi) ** 2 / 4.0

    total = tp * enhanced(1, 1) + fp * enhanced(1, 0) + fn * enhanced(0, 1) + tn * enhanced(0, 0)
    return total / n


def e_measure(pred, gt) -> float:
    """Mean enhanced-alignment measure over the threshold sweep."""
    pred, gt = _pair(pred, gt)
    gt = _binary_gt(gt)
    g = gt.sum()
    if g == 0 or g == gt.size:
        side = int(g > 0)
        tp, fp = threshold_counts(pred, gt, THRESHOLDS)
        fg_frac = (tp + fp) / gt.size
        raw = (fg_frac if side else 1.0 - fg_frac).mean()
        return _degenerate_score(pred, side, raw)
    return float(emeasure_curve(pred, gt).mean())


# --------------------------------------------------------------------------
# S-measure
# --------------------------------------------------------------------------


def _s_object_part(values):
    if values.size == 0:
        return 0.0
    mean = values.mean()
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * mean / (mean**2 + 1.0 + std + _EPS)


def _s_object(pred, gt):
    fg = gt > 0
    u = fg.mean()
    o_fg = _s_object_part(pred[fg])
    o_bg = _s_object_part(1.0 - pred[~fg])
    return u * o_fg + (1.0 - u) * o_bg


def _ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x**2 + y**2) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0 else 0.0


def _centroid(gt):
    h, w = gt.shape
    if gt.sum() == 0:
        return round(w / 2), round(h / 2)
    rows, cols = np.nonzero(gt)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _s_region(pred, gt):
    h, w = gt.shape
    cx, cy = _centroid(gt)
    cx, cy = min(max(cx, 1), w - 1), min(max(cy, 1), h - 1)
    area = h * w
    quads = (
        (slice(0, cy), slice(0, cx), cx * cy / area),
        (slice(0, cy), slice(cx, w), (w - cx) * cy / area),
        (slice(cy, h), slice(0, cx), cx * (h - cy) / area),
        (slice(cy, h), slice(cx, w), (w - cx) * (h - cy) / area),
    )
    return sum(wt * _ssim(pred[ys, xs], gt[ys, xs]) for ys, xs, wt in quads)


def s_measure(pred, gt, alpha: float = ALPHA) -> float:
    """Structure measure: ``alpha`` * object-aware + (1 - alpha) * region-aware similarity."""
    pred, gt = _pair(pred, gt)
    gt = _binary_gt(gt).astype(np.float64)
    y = gt.mean()
    if y == 0:
        return _degenerate_score(pred, 0, 1.0 - pred.mean())
    if y == 1:
        return _degenerate_score(pred, 1, pred.mean())
    q = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(max(q, 0.0))


# --------------------------------------------------------------------------
# dataset report
# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    s_measure: float
    f_measure: float
    e_measure: float
    mae: float
    uncertainty_mae: float | None = None
    per_image: list = field(default_factory=list)

    def row(self, sample_id: str = AGGREGATE_ID) -> dict:
        return {
            "id": sample_id,
            "s_measure": self.s_measure,
            "f_measure": self.f_measure,
            "e_measure": self.e_measure,
            "mae": self.mae,
            "uncertainty_mae": self.uncertainty_mae,
        }


def evaluate_image(pred, gt, pred_unc=None, gt_unc=None) -> dict:
    row = {
        "s_measure": s_measure(pred, gt),
        "f_measure": mean_fmeasure(pred, gt),
        "e_measure": e_measure(pred, gt),
        "mae": mae(pred, gt),
        "uncertainty_mae": None,
    }
    if pred_unc is not None:
        row["uncertainty_mae"] = uncertainty_mae(pred_unc, gt_unc)
    return row


def aggregate(rows: Sequence[dict]) -> MetricReport:
    def mean_of(key):
        vals = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    return MetricReport(
        mean_of("s_measure"), mean_of("f_measure"), mean_of("e_measure"), mean_of("mae"),
        mean_of("uncertainty_mae"), list(rows),
    )


def read_prediction(path, shape) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (shape[1], shape[0]):
            im = im.resize((shape[1], shape[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def report(samples, predictions_dir, uncertainty_dir=None) -> MetricReport:
    """Score saved ``<id>.png`` predictions against each sample's majority map.

    With ``uncertainty_dir``, also compares ``<id>_predictive.dstn`` with the
    normalized entropy of the mean annotation.
    """
    samples = list(samples)
    predictions_dir = Path(predictions_dir)
    missing = [s.id for s in samples if not (predictions_dir / f"{s.id}.png").exists()]
    if uncertainty_dir is not None:
        missing += [
            s.id for s in samples if not (Path(uncertainty_dir) / f"{s.id}_predictive.dstn").exists()
        ]
    if missing:
        raise MissingPredictionError(sorted(set(missing)))
    rows = []
    for s in samples:
        pred = read_prediction(predictions_dir / f"{s.id}.png", s.majority.shape)
        pu = gu = None
        if uncertainty_dir is not None:
            pu = load_uncertainty(uncertainty_dir, s.id, "predictive")
            gu = gt_predictive_uncertainty(s.annotations)
        rows.append({"id": s.id, **evaluate_image(pred, s.majority, pu, gu)})
    return aggregate(rows)


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def to_csv(rep: MetricReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rep.per_image:
        writer.writerow([r["id"]] + [_fmt(r[k]) for k in CSV_FIELDS[1:]])
    agg = rep.row()
    writer.writerow([AGGREGATE_ID] + [_fmt(agg[k]) for k in CSV_FIELDS[1:]])
    return buf.getvalue()


def write_csv(rep: MetricReport, path):
    Path(path).write_text(to_csv(rep))


def read_aggregate(path) -> dict:
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, skipinitialspace=True):
            if row["id"] == AGGREGATE_ID:
                return {k: (float(v) if v not in ("", None) else None) for k, v in row.items() if k != "id"}
    raise InvalidInputError(f"{path}: no {AGGREGATE_ID} row")


def render_table(named_rows: dict) -> str:
    """Plain-text table, one line per run, columns in the order S, F, E, M (+ U-MAE)."""
    with_unc = any(r.get("uncertainty_mae") is not None for r in named_rows.values())
    headers = ["run"] + [h for _, h in TABLE_COLUMNS] + (["U-MAE ↓"] if with_unc else [])
    lines = []
    for name, r in named_rows.items():
        cells = [name] + [f"{r[k]:.3f}" for k, _ in TABLE_COLUMNS]
        if with_unc:
            cells.append("-" if r.get("uncertainty_mae") is None else f"{r['uncertainty_mae']:.3f}")
        lines.append(cells)
    widths = [max(len(h), *(len(c[i]) for c in lines)) for i, h in enumerate(headers)]
    out = [" | ".join(h.ljust(w) for h, w in zip(headers, widths))]
    out.append("-+-".join("-" * w for w in widths))
    out += [" | ".join(c.ljust(w) for c, w in zip(cells, widths)) for cells in lines]
    return "\n".join(out)
