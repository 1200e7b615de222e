"""End-to-end estimation (baseline, network, external refinement) and evaluation."""
from __future__ import annotations

import enum
import hashlib
import os
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError
from .geom import PointCloud, build_spatial_index
from .metrics import CategoryRecord, EvalReport, evaluate_cloud
from .net import RefineNet, prepare_batch
from .orient_init import NormalSource, OrientedNormalField, init_oriented_normals
from .synthdata import DatasetManifest, strip_extension, read_triples, write_triples
from .train import NetworkInput, load_model, make_inputs

INFERENCE_SEED = 0


class RunMode(str, enum.Enum):
    BASELINE_PCA_MST = "BASELINE_PCA_MST"
    NETWORK = "NETWORK"
    REFINE_EXTERNAL = "REFINE_EXTERNAL"


@dataclass
class EstimationRun:
    input_path: str
    mode: RunMode
    output_path: str
    checkpoint: str | None = None
    init_normals_path: str | None = None
    timings: dict = field(default_factory=lambda: {"init_seconds": 0.0, "inference_seconds": 0.0})

    def __post_init__(self):
        if self.mode is not RunMode.BASELINE_PCA_MST and not self.checkpoint:
            raise DataError(f"{self.mode.value} needs a model checkpoint")
        if self.mode is RunMode.REFINE_EXTERNAL and not self.init_normals_path:
            raise DataError("refining external normals needs an init normals file")


def estimate_baseline(cloud: PointCloud, k_pca: int = 16, k_graph: int = 8) -> OrientedNormalField:
    return init_oriented_normals(cloud, k_pca=k_pca, k_graph=k_graph)


class NetworkPredictor:
    """Adapts a trained network to the per-query inference interface."""

    def __init__(self, model: RefineNet):
        self.model = model
        self.config = model.config

    def infer(self, inputs: list[NetworkInput], n_init_pca: np.ndarray):
        """Unoriented normals (PCA frame), initial-sign agreement and sign decision per item."""
        batch = prepare_batch(self.config, np.stack([i.patch for i in inputs]),
                              np.stack([i.cloud for i in inputs]), n_init=n_init_pca)
        with T.no_grad():
            out = self.model.forward(batch)
        return out.normal_pca_frame(), out.sgn_mst, out.sign_decision()


@dataclass
class StubConfig:
    n_p: int = 16
    n_d: int = 16


class StubModel:
    """Predicts the PCA normal itself and always keeps the initial sign."""

    def __init__(self, config: StubConfig | None = None):
        self.config = config or StubConfig()

    def infer(self, inputs, n_init_pca):
        n = len(inputs)
        normal = np.tile([0.0, 0.0, 1.0], (n, 1))
        sgn = np.where(np.asarray(n_init_pca)[:, 2] >= 0, 1.0, -1.0)
        return normal, sgn, np.ones(n)


def subset_queries(n: int, subset: int | None) -> np.ndarray:
    if subset is None or subset >= n:
        return np.arange(n)
    if subset < 1:
        raise DataError(f"subset must be positive, got {subset}")
    return np.sort(np.random.default_rng(INFERENCE_SEED).choice(n, size=subset, replace=False))


def estimate_network(cloud: PointCloud, model, init_field: OrientedNormalField | None = None,
                     k_pca: int = 16, k_graph: int = 8, subset: int | None = None,
                     batch_size: int = 64, timings: dict | None = None) -> OrientedNormalField:
    """Refine an initial oriented field with ``model``.

    Points outside ``subset`` keep their initial normal. ``timings`` (if given)
    receives ``init_seconds`` and ``inference_seconds``.
    """
    t0 = time.perf_counter()
    if init_field is None:
        init_field = init_oriented_normals(cloud, k_pca=k_pca, k_graph=k_graph)
    if len(init_field) != len(cloud):
        raise DataError(f"init field has {len(init_field)} normals for {len(cloud)} points")
    t1 = time.perf_counter()

    cfg = model.config
    pts = cloud.points
    index = build_spatial_index(pts)
    queries = subset_queries(len(pts), subset)
    normals = init_field.normals.copy()
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        inputs = make_inputs(pts, index, chunk, cfg,
                             [np.random.default_rng([INFERENCE_SEED, int(q)]) for q in chunk])
        rots = np.stack([i.rotation for i in inputs])
        n_init_pca = np.matmul(init_field.normals[chunk][:, None, :], rots)[:, 0]
        n_pca, sgn, s_hat = model.infer(inputs, n_init_pca)
        world = np.matmul(np.asarray(n_pca)[:, None, :], np.swapaxes(rots, 1, 2))[:, 0]
        normals[chunk] = world * (np.asarray(sgn) * np.asarray(s_hat))[:, None]
    t2 = time.perf_counter()
    if timings is not None:
        timings["init_seconds"] = t1 - t0
        timings["inference_seconds"] = t2 - t1
    # Signs are reported relative to the initial field.
    signs = np.where((normals * init_field.normals).sum(axis=1) >= 0, 1, -1)
    return OrientedNormalField(normals, signs, NormalSource.NETWORK)


def read_init_normals(path, n: int) -> np.ndarray:
    normals = read_triples(path)
    if len(normals) != n:
        raise DataError(f"{path} has {len(normals)} normals but the cloud has {n} points")
    lengths = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(~(np.abs(lengths - 1.0) <= 1e-3))
    if len(bad):
        raise DataError(f"{path}: normal {bad[0]} (line {bad[0] + 1}) is not unit length (|n| = {lengths[bad[0]]:.6g})")
    return _unitize(normals, lengths)


def _unitize(normals, lengths):
    # Leave vectors that are already unit untouched so a baseline field round-trips bit-exactly.
    off = np.abs(lengths - 1.0) > 1e-12
    out = normals.copy()
    out[off] /= lengths[off, None]
    return out


def refine_external(cloud: PointCloud, init_normals, model, **kwargs) -> OrientedNormalField:
    """Network refinement starting from externally estimated normals (array or file path)."""
    if isinstance(init_normals, (str, os.PathLike)):
        normals = read_init_normals(init_normals, len(cloud))
    else:
        normals = np.asarray(init_normals, dtype=np.float64)
        if normals.shape != cloud.points.shape:
            raise DataError(f"init normals shape {normals.shape} does not match cloud {cloud.points.shape}")
        lengths = np.linalg.norm(normals, axis=1)
        bad = np.flatnonzero(~(np.abs(lengths - 1.0) <= 1e-3))
        if len(bad):
            raise DataError(f"init normal {bad[0]} is not unit length (|n| = {lengths[bad[0]]:.6g})")
        normals = _unitize(normals, lengths)
    init = OrientedNormalField(normals, np.ones(len(normals), dtype=np.int64), NormalSource.EXTERNAL)
    return estimate_network(cloud, model, init_field=init, **kwargs)


def run(job: EstimationRun, cloud: PointCloud, k_pca: int = 16, k_graph: int = 8,
        subset: int | None = None) -> OrientedNormalField:
    """Execute one estimation job and write its output field."""
    if job.mode is RunMode.BASELINE_PCA_MST:
        t0 = time.perf_counter()
        result = estimate_baseline(cloud, k_pca, k_graph)
        job.timings["init_seconds"] = time.perf_counter() - t0
    else:
        model = NetworkPredictor(load_model(job.checkpoint))
        if job.mode is RunMode.REFINE_EXTERNAL:
            result = refine_external(cloud, job.init_normals_path, model, subset=subset, timings=job.timings)
        else:
            result = estimate_network(cloud, model, k_pca=k_pca, k_graph=k_graph, subset=subset,
                                      timings=job.timings)
    Path(job.output_path).parent.mkdir(parents=True, exist_ok=True)
    write_triples(job.output_path, result.normals)
    return result


# ---------------------------------------------------------------------------
# Evaluation

def _digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def prediction_path(pred_dir, entry) -> Path:
    stem = strip_extension(entry.noisy).name
    return Path(pred_dir) / f"{stem}.normals"


def evaluate(manifest: DatasetManifest, pred_dir, error_dir=None) -> EvalReport:
    """Score every manifest entry whose prediction file exists.

    A category with any missing prediction is skipped (and listed); per-point
    oriented CND errors are written to ``error_dir`` as ``<cloud>.err``.
    """
    pred_dir = Path(pred_dir)
    missing = [e.noisy for e in manifest.entries if not prediction_path(pred_dir, e).exists()]
    skipped_cats = sorted({e.category for e in manifest.entries if e.noisy in missing})
    if missing:
        warnings.warn(f"missing predictions for {missing}; skipping categories {skipped_cats}")
    if error_dir is not None:
        Path(error_dir).mkdir(parents=True, exist_ok=True)
    per_cat: dict[str, dict] = {}
    used = []
    for entry in manifest.entries:
        if entry.category in skipped_cats:
            continue
        noisy, clean = manifest.load_noisy(entry), manifest.load_clean(entry)
        ppath = prediction_path(pred_dir, entry)
        pred = read_triples(ppath)
        record, errors = evaluate_cloud(pred, noisy, clean)
        per_cat.setdefault(entry.category, {})[entry.shape] = record
        used.append(ppath)
        if error_dir is not None:
            np.savetxt(Path(error_dir) / f"{ppath.stem}.err", errors, fmt="%.9g")
    categories = {cat: CategoryRecord.mean_of(recs) for cat, recs in per_cat.items()}
    manifest_file = manifest.base_dir / "manifest.json"
    metadata = {
        "model_id": _digest(sorted(used)) if used else None,
        "dataset_id": _digest([manifest_file]) if manifest_file.exists() else None,
        "timestamp": _timestamp(),
    }
    return EvalReport.from_categories(categories, metadata, skipped=[str(m) for m in missing])
