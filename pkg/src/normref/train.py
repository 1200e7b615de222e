"""Desk-scale training: item sampling, the optimisation loop, checkpoints and resume."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import loss as L
from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .errors import DataError, NumericError
from .geom import SpatialIndex, build_spatial_index, extract_patches
from .metrics import nearest_clean
from .net import Batch, ModelConfig, RefineNet, prepare_batch
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .orient_init import init_oriented_normals
from .synthdata import DatasetManifest

log = logging.getLogger(__name__)

WEIGHTS_FILE = "weights.bin"
MODEL_FILE = "model.json"
LOSS_COLUMNS = ("epoch", "mean_total", "mean_l1", "mean_l2", "mean_l3", "mean_l4", "mean_l5")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr0: float = 5e-4
    weight_decay: float = 1e-2
    queries_per_shape: int = 64
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 5.0
    k_pca: int = 16
    k_graph: int = 8
    use_mst_init: bool = True
    use_feature_augmentation: bool = True
    use_cnd_gt: bool = True
    use_l2: bool = True
    use_l5: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "queries_per_shape", "k_pca", "k_graph"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr0 < 0 or self.weight_decay < 0 or self.checkpoint_every < 0:
            raise DataError("lr0, weight_decay and checkpoint_every must be nonnegative")

    def loss_config(self) -> L.LossConfig:
        return L.LossConfig(use_cnd_gt=self.use_cnd_gt, use_l2=self.use_l2, use_l5=self.use_l5)

    def apply_to(self, model_cfg: ModelConfig) -> ModelConfig:
        """Copy the toggles that change the network's graph into the model config."""
        return dataclasses.replace(model_cfg, use_mst_init=self.use_mst_init,
                                   dual_sign_head=self.use_feature_augmentation)


def load_train_config(path) -> tuple[TrainConfig, ModelConfig]:
    """Read ``train.json``: flat TrainConfig keys plus an optional ``"model"`` object."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    model_raw = raw.pop("model", {})
    unknown = set(raw) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise DataError(f"{path}: unknown training keys {sorted(unknown)}")
    try:
        return TrainConfig(**raw), ModelConfig.from_dict(model_raw)
    except TypeError as exc:
        raise DataError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Data

@dataclass
class TrainingCloud:
    name: str
    shape: str
    points: np.ndarray
    index: SpatialIndex
    stale_normals: np.ndarray
    clean_normals: np.ndarray   # normal of each point's nearest clean twin
    init_normals: np.ndarray


def prepare_cloud(noisy, clean, k_pca: int = 16, k_graph: int = 8, shape: str = "") -> TrainingCloud:
    corr = nearest_clean(noisy, clean)
    field = init_oriented_normals(noisy, k_pca=k_pca, k_graph=k_graph)
    return TrainingCloud(noisy.name, shape or noisy.name, noisy.points, build_spatial_index(noisy.points),
                         noisy.gt_normals, clean.gt_normals[corr], field.normals)


def load_training_clouds(manifest: DatasetManifest, k_pca: int = 16, k_graph: int = 8) -> list[TrainingCloud]:
    clouds = []
    for entry in manifest.entries:
        noisy, clean = manifest.load_noisy(entry), manifest.load_clean(entry)
        clouds.append(prepare_cloud(noisy, clean, k_pca, k_graph, shape=entry.shape))
    if not clouds:
        raise DataError("manifest lists no clouds")
    return clouds


@dataclass
class NetworkInput:
    patch: np.ndarray        # (n_p, 3) normalised, PCA frame, query first
    cloud: np.ndarray        # (n_d, 3) same frame, query first
    rotation: np.ndarray     # world -> PCA frame (row vectors: x @ R)
    neighbor_indices: np.ndarray


def _subsample(n: int, query: int, n_d: int, rng: np.random.Generator) -> np.ndarray:
    """``n_d`` indices: the query first, then a uniform sample of the other points."""
    if n >= n_d:
        others = rng.choice(n - 1, size=n_d - 1, replace=False)
    else:
        warnings.warn(f"cloud of {n} points is smaller than n_d={n_d}; sampling with replacement")
        others = rng.integers(0, n - 1, size=n_d - 1) if n > 1 else np.zeros(n_d - 1, dtype=np.int64)
    others = others + (others >= query)
    return np.concatenate([[query], others])


def make_inputs(points, index: SpatialIndex, queries, cfg: ModelConfig, rngs) -> list[NetworkInput]:
    """Patch of the ``n_p`` nearest points plus a uniform random subsample of the
    cloud for each query, both centred on the patch centroid and PCA-rotated."""
    queries = np.asarray(queries, dtype=np.int64)
    nbr, cents, _, rots, coords = extract_patches(points, index, queries, cfg.n_p)
    out = []
    for i, (q, rng) in enumerate(zip(queries, rngs)):
        sub = points[_subsample(len(points), int(q), cfg.n_d, rng)] - cents[i]
        scale = np.sqrt((sub * sub).sum(axis=1).max())
        if scale <= 0:
            raise DataError(f"cloud subsample around point {q} collapses to a point")
        out.append(NetworkInput(coords[i], (sub / scale) @ rots[i], rots[i], nbr[i]))
    return out


def make_input(points, index: SpatialIndex, query: int, cfg: ModelConfig,
               rng: np.random.Generator) -> NetworkInput:
    return make_inputs(points, index, [query], cfg, [rng])[0]


@dataclass
class TrainingItem:
    inputs: NetworkInput
    gt_clean: np.ndarray     # PCA frame
    gt_stale: np.ndarray
    n_init: np.ndarray


def sample_training_item(clouds: list[TrainingCloud], rng: np.random.Generator, cfg: ModelConfig,
                         shape: str | None = None) -> TrainingItem:
    """Random query from a random cloud (restricted to ``shape`` when given)."""
    pool = clouds if shape is None else [c for c in clouds if c.shape == shape]
    if not pool:
        raise DataError(f"no training clouds for shape {shape!r}")
    cloud = pool[int(rng.integers(len(pool)))]
    q = int(rng.integers(len(cloud.points)))
    inp = make_input(cloud.points, cloud.index, q, cfg, rng)
    rot = inp.rotation
    return TrainingItem(inp, cloud.clean_normals[q] @ rot, cloud.stale_normals[q] @ rot,
                        cloud.init_normals[q] @ rot)


def collate(items: list[TrainingItem], cfg: ModelConfig) -> tuple[Batch, np.ndarray, np.ndarray]:
    batch = prepare_batch(cfg, np.stack([it.inputs.patch for it in items]),
                          np.stack([it.inputs.cloud for it in items]),
                          n_init=np.stack([it.n_init for it in items]))
    return batch, np.stack([it.gt_clean for it in items]), np.stack([it.gt_stale for it in items])


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, model: RefineNet, state: OptimizerState, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.arrays().items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    full_meta = {"step": state.step, "lr0": state.lr0, "weight_decay": state.weight_decay,
                 "total_steps": state.total_steps, **(meta or {})}
    save_arrays(path / WEIGHTS_FILE, arrays, full_meta)
    (path / MODEL_FILE).write_text(model.config.to_json())
    return path


def _read_checkpoint(path):
    path = Path(path)
    if not (path / WEIGHTS_FILE).exists() or not (path / MODEL_FILE).exists():
        raise DataError(f"{path}: checkpoint directory needs {WEIGHTS_FILE} and {MODEL_FILE}")
    try:
        cfg = ModelConfig.from_dict(json.loads((path / MODEL_FILE).read_text()))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path / MODEL_FILE}: invalid JSON ({exc})") from None
    arrays, meta = load_arrays(path / WEIGHTS_FILE)
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in arrays.items():
        group, _, name = key.partition("/")
        if group not in groups:
            raise DataError(f"{path}: unexpected tensor {key}")
        groups[group][name] = arr
    RefineNet(cfg, groups["param"])  # validates names and shapes against the config
    state = OptimizerState(lr0=meta.get("lr0", 5e-4), weight_decay=meta.get("weight_decay", 0.0),
                           total_steps=meta.get("total_steps", 1), step=meta.get("step", 0),
                           m=groups["adam_m"], v=groups["adam_v"])
    return groups["param"], cfg, state, meta


def load_checkpoint(path) -> tuple[dict, ModelConfig, OptimizerState]:
    params, cfg, state, _ = _read_checkpoint(path)
    return params, cfg, state


def load_model(path) -> RefineNet:
    params, cfg, _ = load_checkpoint(path)
    return RefineNet(cfg, params)


# ---------------------------------------------------------------------------
# Optimisation

def compute_gradients(model: RefineNet, batch: Batch, gt_clean, gt_stale,
                      train_cfg: TrainConfig) -> tuple[float, dict, dict]:
    """One forward/backward pass. Returns ``(total, part values, gradients)``."""
    model.zero_grad()
    out = model.forward(batch)
    total, parts = L.network_losses(out, gt_clean, gt_stale, train_cfg.loss_config(),
                                    feature_augmentation=train_cfg.use_feature_augmentation)
    value = total.item()
    if not math.isfinite(value):
        raise NumericError(f"loss is not finite ({value})")
    T.backward(total)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    part_values = {k: (v.item() if v is not None else 0.0) for k, v in parts.items()}
    return value, part_values, grads


def _write_losses(path: Path, history: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[dict]


def train(clouds: list[TrainingCloud], model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir,
          resume=None) -> TrainResult:
    """Train from scratch (or from ``resume``) and write checkpoints plus ``losses.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shapes = list(dict.fromkeys(c.shape for c in clouds))
    n_items = len(shapes) * train_cfg.queries_per_shape
    steps_per_epoch = math.ceil(n_items / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch

    if resume is not None:
        params, ckpt_cfg, state, meta = _read_checkpoint(resume)
        model_cfg = ckpt_cfg
        model = RefineNet(model_cfg, params)
        start_epoch = int(meta.get("epoch", 0))
        history = list(meta.get("history", []))
        state.total_steps = total_steps
    else:
        model_cfg = train_cfg.apply_to(model_cfg)
        model = RefineNet(model_cfg)
        state = OptimizerState(lr0=train_cfg.lr0, weight_decay=train_cfg.weight_decay, total_steps=total_steps)
        start_epoch, history = 0, []

    meta_base = {"train_config": asdict(train_cfg)}
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        schedule = np.repeat(np.arange(len(shapes)), train_cfg.queries_per_shape)[rng.permutation(n_items)]
        sums = dict.fromkeys(("total",) + L.PART_NAMES, 0.0)
        for b in range(steps_per_epoch):
            chosen = schedule[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            items = [sample_training_item(clouds, rng, model_cfg, shape=shapes[s]) for s in chosen]
            batch, gt_clean, gt_stale = collate(items, model_cfg)
            try:
                value, parts, grads = compute_gradients(model, batch, gt_clean, gt_stale, train_cfg)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1} batch {b}: {exc}") from None
            clip_grad_norm(grads, train_cfg.grad_clip)
            adamw_step(state, model.arrays(), grads)
            sums["total"] += value
            for k, v in parts.items():
                sums[k] += v
        row = {"epoch": epoch + 1, "mean_total": sums["total"] / steps_per_epoch}
        row.update({f"mean_{k}": sums[k] / steps_per_epoch for k in L.PART_NAMES})
        history.append(row)
        _write_losses(out / "losses.csv", history)
        log.info("epoch %d/%d loss %.6f", epoch + 1, train_cfg.epochs, row["mean_total"])
        meta = {**meta_base, "epoch": epoch + 1, "history": history}
        if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(out / f"epoch_{epoch + 1:04d}", model, state, meta)

    final = save_checkpoint(out / "final", model, state,
                            {**meta_base, "epoch": train_cfg.epochs, "history": history})
    _write_losses(out / "losses.csv", history)
    return TrainResult(final, history)
