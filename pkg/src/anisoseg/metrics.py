"""Dice, ASSD, RVE and a paired t-test, plus CSV/JSON summaries of per-case results."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from .errors import ShapeError, UndefinedMetricError

METRIC_FIELDS = ("dice", "assd_mm", "rve_pct")


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float
    assd_mm: Optional[float]
    rve_pct: Optional[float]


def _mask(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x)).astype(bool)


def _spacing(*xs, default=None):
    found = [tuple(x.spacing_mm) for x in xs if hasattr(x, "spacing_mm")]
    if len(set(found)) > 1:
        raise ShapeError(f"masks have different spacings {found}")
    if found:
        return found[0]
    return tuple(default) if default is not None else (1.0, 1.0, 1.0)


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice_score(a, b) -> float:
    a, b = _mask(a), _mask(b)
    _same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


_SIX = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-bounds neighbour."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~interior


def assd(a, b, spacing_mm=None) -> float:
    """Average symmetric surface distance in mm (exact nearest-neighbour search)."""
    spacing = np.asarray(_spacing(a, b, default=spacing_mm), dtype=np.float64)
    ma, mb = _mask(a), _mask(b)
    _same_shape(ma, mb)
    if not ma.any() or not mb.any():
        raise UndefinedMetricError("ASSD is undefined when either mask is empty")
    pa = np.argwhere(surface_voxels(ma)) * spacing
    pb = np.argwhere(surface_voxels(mb)) * spacing
    da, _ = cKDTree(pb).query(pa, k=1)
    db, _ = cKDTree(pa).query(pb, k=1)
    return float((da.sum() + db.sum()) / (len(pa) + len(pb)))


def rve(pred, gt, spacing_mm=None) -> float:
    """Relative volume error in percent."""
    spacing = _spacing(pred, gt, default=spacing_mm)
    mp, mg = _mask(pred), _mask(gt)
    _same_shape(mp, mg)
    if not mg.any():
        raise UndefinedMetricError("RVE is undefined for an empty ground truth")
    voxel = float(np.prod(spacing))
    v_pred, v_gt = mp.sum() * voxel, mg.sum() * voxel
    return float(100.0 * abs(v_pred - v_gt) / v_gt)


def case_metrics(case_id: str, pred, gt, spacing_mm=None) -> CaseMetrics:
    try:
        d_assd = assd(pred, gt, spacing_mm)
    except UndefinedMetricError:
        d_assd = None
    try:
        d_rve = rve(pred, gt, spacing_mm)
    except UndefinedMetricError:
        d_rve = None
    return CaseMetrics(case_id, dice_score(pred, gt), d_assd, d_rve)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    zero_variance: bool = False


def paired_ttest(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on d = x - y with n - 1 degrees of freedom.

    All-zero differences give t=0, p=1. Identical non-zero differences
    (zero variance) give t=+-inf, p=0 and set ``zero_variance``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"paired samples must be equal-length 1D sequences, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise ShapeError("paired t-test needs at least two pairs")
    d = x - y
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0)
        return TTestResult(math.copysign(math.inf, mean), 0.0, zero_variance=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(float(t), float(p))


def summarize(rows: Iterable[CaseMetrics]) -> dict:
    """Mean and sample std of each metric, skipping undefined entries."""
    rows = list(rows)
    out = {"n_cases": len(rows)}
    for name in METRIC_FIELDS:
        vals = np.array([getattr(r, name) for r in rows if getattr(r, name) is not None], dtype=np.float64)
        out[name] = {
            "mean": float(vals.mean()) if len(vals) else None,
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else (0.0 if len(vals) else None),
            "n": int(len(vals)),
        }
    return out


def format_summary(summary: dict) -> str:
    parts = []
    for name, scale, label in (("dice", 100.0, "Dice(%)"), ("assd_mm", 1.0, "ASSD(mm)"), ("rve_pct", 1.0, "RVE(%)")):
        s = summary[name]
        if s["mean"] is None:
            parts.append(f"{label} n/a")
        else:
            parts.append(f"{label} {s['mean'] * scale:.2f}±{s['std'] * scale:.2f}")
    return "  ".join(parts)


def write_metrics_csv(path, rows: Iterable[CaseMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("case_id",) + METRIC_FIELDS)
        for r in rows:
            writer.writerow([r.case_id] + ["" if getattr(r, f) is None else repr(getattr(r, f)) for f in METRIC_FIELDS])


def read_metrics_csv(path) -> List[CaseMetrics]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            vals = [None if rec[f] == "" else float(rec[f]) for f in METRIC_FIELDS]
            rows.append(CaseMetrics(rec["case_id"], *vals))
    return rows


def write_summary_json(path, rows: Iterable[CaseMetrics]) -> dict:
    summary = summarize(rows)
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")
    return summary
