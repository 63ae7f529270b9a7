"""Dice and average symmetric surface distance (ASSD) per class."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import CLASS_NAMES, FOREGROUND_CLASSES, Dataset, DataError, LabelKind, LabelMap

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, LabelMap) else np.asarray(x)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice_score(pred, gt, class_id: int = 1) -> float:
    """2|A∩B| / (|A| + |B|) on the binarised class; two empty masks score 1."""
    p, g = _arr(pred) == class_id, _arr(gt) == class_id
    _check_shapes(p, g)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour.

    Voxels on the array border count as surface (outside is background).
    """
    mask = mask.astype(bool)
    if mask.ndim != 3:
        raise ValueError("surface_mask expects a 3D mask")
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONN, border_value=0)
    return mask & ~eroded


def assd(pred, gt, class_id: int = 1, spacing: Optional[Sequence[float]] = None) -> float:
    """Average symmetric surface distance in mm.

    Returns NaN when exactly one of the two masks is empty (undefined) and
    0.0 when both are empty.
    """
    p, g = _arr(pred) == class_id, _arr(gt) == class_id
    _check_shapes(p, g)
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, LabelMap) else (1.0, 1.0, 1.0)
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    has_p, has_g = p.any(), g.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return math.nan
    sp, sg = surface_mask(p), surface_mask(g)
    # distance from every voxel to the nearest surface voxel of the other mask
    dt_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dt_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    total = dt_g[sp].sum() + dt_p[sg].sum()
    return float(total / (sp.sum() + sg.sum()))


@dataclass
class CaseMetrics:
    case_id: str
    class_id: int
    dice: float
    assd: float  # NaN = undefined


@dataclass
class ClassAggregate:
    class_id: int
    dice_mean: float
    dice_std: float
    assd_mean: float
    assd_std: float
    n: int
    n_assd: int
    n_assd_undefined: int


def _mean_std(values: List[float]):
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class MetricsReport:
    rows: List[CaseMetrics]
    classes: Sequence[int] = FOREGROUND_CLASSES
    prediction_source: str = ""
    ground_truth_source: str = ""
    aggregates: Dict[int, ClassAggregate] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.aggregate()

    def aggregate(self) -> Dict[int, ClassAggregate]:
        out = {}
        for c in self.classes:
            rows = [r for r in self.rows if r.class_id == c]
            dm, ds = _mean_std([r.dice for r in rows])
            defined = [r.assd for r in rows if not math.isnan(r.assd)]
            am, as_ = _mean_std(defined)
            out[c] = ClassAggregate(c, dm, ds, am, as_, len(rows), len(defined), len(rows) - len(defined))
        return out

    def mean_dice(self, class_id: int = 1) -> float:
        return self.aggregates[class_id].dice_mean

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "case_id", "class_id", "class_name", "dice", "dice_std", "assd_mm", "assd_std", "n", "n_assd_undefined"])
        for r in self.rows:
            w.writerow(["case", r.case_id, r.class_id, CLASS_NAMES[r.class_id], f"{r.dice:.6f}", "", _fmt(r.assd), "", 1, int(math.isnan(r.assd))])
        for c, a in self.aggregates.items():
            w.writerow(["aggregate", "", c, CLASS_NAMES[c], f"{a.dice_mean:.6f}", f"{a.dice_std:.6f}", _fmt(a.assd_mean), _fmt(a.assd_std), a.n, a.n_assd_undefined])
        return buf.getvalue()

    def to_text(self, title: str = "") -> str:
        lines = []
        if title:
            lines.append(title)
        lines.append("classes: " + ", ".join(f"{k}={v}" for k, v in CLASS_NAMES.items()))
        if self.prediction_source or self.ground_truth_source:
            lines.append(f"prediction: {self.prediction_source}   ground truth: {self.ground_truth_source}")
        lines.append(f"{'class':<10}{'Dice (mean ± std)':>24}{'ASSD mm (mean ± std)':>26}{'n':>5}{'undef':>7}")
        for c, a in self.aggregates.items():
            note = " (n=1)" if a.n == 1 else ""
            lines.append(
                f"{CLASS_NAMES[c]:<10}{a.dice_mean:>13.4f} ± {a.dice_std:<8.4f}"
                f"{_fmt(a.assd_mean, 4):>15} ± {_fmt(a.assd_std, 4):<8}{a.n:>5}{a.n_assd_undefined:>7}{note}"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "metrics", title: str = "") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.txt").write_text(self.to_text(title))


def _fmt(x: float, nd: int = 6) -> str:
    return "undefined" if math.isnan(x) else f"{x:.{nd}f}"


def evaluate_labelmaps(preds: Dict[str, LabelMap], gts: Dict[str, LabelMap], classes=FOREGROUND_CLASSES, **sources) -> MetricsReport:
    missing = sorted(set(gts) ^ set(preds))
    if missing:
        raise DataError(f"prediction / ground-truth case ids differ: {missing}")
    rows = []
    for cid in sorted(gts):
        p, g = preds[cid], gts[cid]
        for c in classes:
            rows.append(CaseMetrics(cid, c, dice_score(p, g, c), assd(p, g, c, g.spacing)))
    return MetricsReport(rows, tuple(classes), **sources)


def evaluate_dataset(preds: Dataset, gts: Dataset, classes=FOREGROUND_CLASSES) -> MetricsReport:
    """Score a prediction dataset against a ground-truth dataset.

    Ground-truth cases must carry true labels; pseudo-labels are refused.
    """
    for c in gts:
        if c.label_kind is not LabelKind.TRUE:
            raise DataError(f"ground truth case {c.case_id!r} has label_kind={c.label_kind.value}; need true labels")
    if set(preds.case_ids) != set(gts.case_ids):
        raise DataError(
            f"case ids differ: only in predictions {sorted(set(preds.case_ids) - set(gts.case_ids))}, "
            f"only in ground truth {sorted(set(gts.case_ids) - set(preds.case_ids))}"
        )
    p = {c.case_id: c.load_labels() for c in preds}
    g = {c.case_id: c.load_labels() for c in gts}
    return evaluate_labelmaps(p, g, classes, prediction_source=preds.name, ground_truth_source=gts.name)
