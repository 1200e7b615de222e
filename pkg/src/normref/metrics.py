"""RMSE and Chamfer Normal Distance, sign agreement, and evaluation reports."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError
from .geom import PointCloud, SpatialIndex

UNIT_TOLERANCE = 1e-3
REPORT_VERSION = 1
METRIC_FIELDS = ("rmse_deg", "cnd_deg", "oriented_rmse_deg", "oriented_cnd_deg", "sign_agreement_ratio")
_TABLE_LABELS = {
    "rmse_deg": "RMSE",
    "cnd_deg": "CND",
    "oriented_rmse_deg": "RMSE (oriented)",
    "oriented_cnd_deg": "CND (oriented)",
    "sign_agreement_ratio": "Sign agreement",
}


def as_unit(pred, n: int | None = None) -> np.ndarray:
    """Validate predictions; renormalise rows within ``UNIT_TOLERANCE`` of unit length."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != 3:
        raise DataError(f"predictions must have shape (N, 3), got {pred.shape}")
    if n is not None and len(pred) != n:
        raise DataError(f"{len(pred)} predictions for {n} points")
    lengths = np.linalg.norm(pred, axis=1)
    bad = np.flatnonzero(~(np.abs(lengths - 1.0) <= UNIT_TOLERANCE))
    if len(bad):
        raise DataError(f"prediction {bad[0]} is not unit length (|n| = {lengths[bad[0]]:.6g})")
    return pred / lengths[:, None]


def angle_errors(pred, ref, oriented: bool) -> np.ndarray:
    """Per-point angles in radians: [0, pi/2] unoriented, [0, pi] oriented."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    cos = (pred * ref).sum(axis=1)
    if not oriented:
        cos = np.abs(cos)
    # atan2 stays accurate near 0 and pi where arccos loses half the digits.
    sin = np.linalg.norm(np.cross(pred, ref), axis=1)
    return np.arctan2(sin, cos)


def _rms_deg(angles) -> float:
    return math.degrees(math.sqrt(float(np.mean(angles * angles))))


def nearest_clean(noisy: PointCloud, clean: PointCloud | None) -> np.ndarray:
    """Index of each noisy point's nearest clean point (lowest index on ties)."""
    if clean is None:
        raise DataError(f"cloud {noisy.name!r} has no clean twin for correspondence")
    idx, _ = SpatialIndex(clean.points).query(noisy.points, 1)
    return idx[:, 0]


def cnd(pred, noisy: PointCloud, clean: PointCloud, oriented: bool,
        correspondence: np.ndarray | None = None) -> float:
    """Chamfer Normal Distance in degrees: RMS angle to each point's clean twin normal."""
    if clean is None or clean.gt_normals is None:
        raise DataError("CND needs a clean cloud with ground-truth normals")
    pred = as_unit(pred, len(noisy))
    corr = nearest_clean(noisy, clean) if correspondence is None else correspondence
    return _rms_deg(angle_errors(pred, clean.gt_normals[corr], oriented))


def rmse(pred, gt_normals, oriented: bool) -> float:
    """RMS angle in degrees against the annotated normals of the evaluated cloud."""
    gt = np.asarray(gt_normals, dtype=np.float64)
    pred = as_unit(pred, len(gt))
    return _rms_deg(angle_errors(pred, gt, oriented))


def sign_agreement(pred, reference_normals) -> float:
    """Fraction of points whose prediction has positive dot product with the reference."""
    pred = np.asarray(getattr(pred, "normals", pred), dtype=np.float64)
    ref = np.asarray(reference_normals, dtype=np.float64)
    if pred.shape != ref.shape:
        raise DataError(f"prediction shape {pred.shape} does not match reference {ref.shape}")
    return float(np.mean((pred * ref).sum(axis=1) > 0))


def evaluate_cloud(pred, noisy: PointCloud, clean: PointCloud) -> tuple[dict, np.ndarray]:
    """All metrics for one cloud plus the per-point oriented CND error in degrees."""
    if noisy.gt_normals is None:
        raise DataError(f"cloud {noisy.name!r} has no annotated normals")
    pred = as_unit(pred, len(noisy))
    corr = nearest_clean(noisy, clean)
    twin = clean.gt_normals[corr]
    record = {
        "rmse_deg": _rms_deg(angle_errors(pred, noisy.gt_normals, False)),
        "cnd_deg": _rms_deg(angle_errors(pred, twin, False)),
        "oriented_rmse_deg": _rms_deg(angle_errors(pred, noisy.gt_normals, True)),
        "oriented_cnd_deg": _rms_deg(angle_errors(pred, twin, True)),
        "sign_agreement_ratio": sign_agreement(pred, twin),
    }
    return record, np.degrees(angle_errors(pred, twin, True))


@dataclass
class CategoryRecord:
    rmse_deg: float
    cnd_deg: float
    oriented_rmse_deg: float
    oriented_cnd_deg: float
    sign_agreement_ratio: float
    shapes: dict = field(default_factory=dict)

    @classmethod
    def mean_of(cls, records: dict[str, dict]) -> "CategoryRecord":
        vals = {k: float(np.mean([r[k] for r in records.values()])) for k in METRIC_FIELDS}
        return cls(**vals, shapes=dict(records))


@dataclass
class EvalReport:
    categories: dict[str, CategoryRecord]
    averages: dict[str, float]
    metadata: dict
    skipped: list[str] = field(default_factory=list)

    @classmethod
    def from_categories(cls, categories: dict[str, CategoryRecord], metadata: dict,
                        skipped: list[str] | None = None) -> "EvalReport":
        averages = {k: float(np.mean([getattr(c, k) for c in categories.values()])) if categories else None
                    for k in METRIC_FIELDS}
        return cls(categories, averages, metadata, skipped or [])

    def to_json(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "metadata": self.metadata,
            "categories": {k: asdict(v) for k, v in self.categories.items()},
            "averages": self.averages,
            "skipped": self.skipped,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        """Metrics as rows, categories as columns, with a trailing average column."""
        cols = list(self.categories) + ["Average"]
        width = max(10, *(len(c) for c in cols))
        label_w = max(len(v) for v in _TABLE_LABELS.values())
        lines = [f"{'Metric':<{label_w}} | " + " | ".join(f"{c:>{width}}" for c in cols)]
        lines.append("-" * len(lines[0]))
        for key in METRIC_FIELDS:
            vals = [getattr(self.categories[c], key) for c in self.categories] + [self.averages[key]]
            fmt = "{:>%d.4f}" % width if key == "sign_agreement_ratio" else "{:>%d.2f}" % width
            cells = [fmt.format(v) if v is not None else f"{'n/a':>{width}}" for v in vals]
            lines.append(f"{_TABLE_LABELS[key]:<{label_w}} | " + " | ".join(cells))
        return "\n".join(lines) + "\n"
