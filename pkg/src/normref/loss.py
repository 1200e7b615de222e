"""Training losses: sine loss, z-alignment of the QSTN, point-weight regression,
sign cross-entropy and the contrastive sign term.

Every function takes a batch and returns the batch mean as a scalar Tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError
from .tensor import Tensor

PART_NAMES = ("l1", "l2", "l3", "l4", "l5")
PROB_CLAMP = 1e-7
DELTA_FLOOR = 0.05 ** 2
_Z = np.array([0.0, 0.0, 1.0])


@dataclass
class LossConfig:
    weights: tuple = (0.1, 0.5, 1.0, 0.1, 0.1)
    use_cnd_gt: bool = True
    use_l2: bool = True
    use_l5: bool = True

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 5 or min(self.weights) < 0:
            raise DataError(f"need five nonnegative loss weights, got {self.weights}")


def _batch3(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _check_unit(x: np.ndarray, what: str, tol: float = 1e-6):
    lengths = np.linalg.norm(x, axis=-1)
    if not np.all(np.abs(lengths - 1.0) <= tol):
        raise DataError(f"{what} must be unit vectors (found length {lengths.flat[np.argmax(np.abs(lengths - 1))]:.6g})")


def l1_sine(n_gt, n_hat) -> Tensor:
    """Mean ``|n_gt x n_hat|``; blind to the sign of either vector."""
    n_gt = _batch3(n_gt, "n_gt")
    n_hat = T.as_tensor(n_hat)
    if n_hat.ndim == 1:
        n_hat = T.reshape(n_hat, (1, 3))
    _check_unit(n_gt, "ground-truth normals")
    _check_unit(n_hat.data, "predicted normals")
    return T.mean(T.l2norm(T.cross3(Tensor(n_gt), n_hat), keepdims=False))


def l2_z(n_gt, r_qstn) -> Tensor:
    """Mean ``|(n_gt R) x z|``: pushes the rotated ground truth onto the z axis."""
    n_gt = _batch3(n_gt, "n_gt")
    r = T.as_tensor(r_qstn)
    if r.ndim == 2:
        r = T.reshape(r, (1, 3, 3))
    rotated = T.reshape(T.matmul(Tensor(n_gt[:, None, :]), r), (len(n_gt), 3))
    return T.mean(T.l2norm(T.cross3(rotated, np.broadcast_to(_Z, rotated.shape)), keepdims=False))


def weight_targets(points, n_gt) -> tuple[np.ndarray, np.ndarray]:
    """Target weights ``exp(-(p.n)^2 / delta^2)`` and the per-item ``delta``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 2:
        points = points[None]
    n_gt = _batch3(n_gt, "n_gt")
    m = points.shape[1]
    if m == 0:
        raise DataError("weight loss needs at least one point")
    dist2 = np.einsum("bmk,bk->bm", points, n_gt) ** 2
    delta = np.maximum(DELTA_FLOOR, 0.3 * dist2.sum(axis=1) / m)
    return np.exp(-dist2 / delta[:, None] ** 2), delta


def l3_weights(points, n_gt, w_hat) -> Tensor:
    """Mean squared error between predicted point weights and their geometric targets."""
    target, _ = weight_targets(points, n_gt)
    w_hat = T.as_tensor(w_hat)
    if w_hat.ndim == 1:
        w_hat = T.reshape(w_hat, (1, -1))
    if w_hat.shape != target.shape:
        raise DataError(f"weights shape {w_hat.shape} does not match {target.shape} points")
    return T.mean(T.square(w_hat - target))


def _bce(logit: Tensor, target: np.ndarray) -> Tensor:
    p = T.clip(T.sigmoid(logit), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(T.log(p) * target + T.log(1.0 - p) * (1.0 - target))


def l4_sign_bce(s_plus, s_minus, sgn_mst, sgn_gt) -> Tensor:
    """Cross-entropy for "the initial sign is right" (plus head) and its negation (minus head)."""
    s_plus = T.as_tensor(s_plus)
    agree = np.asarray(sgn_mst, dtype=np.float64) * np.asarray(sgn_gt, dtype=np.float64)
    target = np.broadcast_to((agree > 0).astype(np.float64), s_plus.shape)
    loss = _bce(s_plus, target)
    if s_minus is not None:
        loss = loss + _bce(T.as_tensor(s_minus), 1.0 - target)
    return T.mean(loss)


def l5_contrastive(s_plus, s_minus) -> Tensor:
    """``exp(-(sigma(s+) - sigma(s-))^2)``: small when the two heads disagree."""
    gap = T.sigmoid(s_plus) - T.sigmoid(s_minus)
    return T.mean(T.exp(-T.square(gap)))


def total(parts: dict, config: LossConfig) -> Tensor:
    """Weighted sum of the enabled parts; parts set to ``None`` are skipped."""
    enabled = {"l2": config.use_l2, "l5": config.use_l5}
    out = None
    for name, weight in zip(PART_NAMES, config.weights):
        part = parts.get(name)
        if part is None or not enabled.get(name, True):
            continue
        value = float(np.asarray(T.as_tensor(part).data).sum())
        if not math.isfinite(value):
            raise NumericError(f"loss part {name} is not finite ({value})")
        term = T.as_tensor(part) * weight
        out = term if out is None else out + term
    return Tensor(0.0) if out is None else out


def sign_targets(n_hat_u: np.ndarray, n_gt_frame: np.ndarray) -> np.ndarray:
    """+1 where the unoriented prediction points along the ground truth (ties count as +1)."""
    return np.where((np.asarray(n_hat_u) * np.asarray(n_gt_frame)).sum(axis=-1) >= 0, 1.0, -1.0)


def network_losses(out, gt_clean_pca, gt_stale_pca, config: LossConfig,
                   feature_augmentation: bool = True) -> tuple[Tensor, dict]:
    """All parts for one forward pass.

    Ground-truth normals arrive in the patch's PCA frame; the chosen one (clean
    twin or stale annotation) is carried into the QSTN frame for L3 and L4.
    """
    gt = np.asarray(gt_clean_pca if config.use_cnd_gt else gt_stale_pca, dtype=np.float64)
    r_t = T.transpose(out.r_qstn, (0, 2, 1))
    n_pca = T.reshape(T.matmul(T.reshape(out.n_hat_u, (len(gt), 1, 3)), r_t), (len(gt), 3))
    gt_q = np.matmul(gt[:, None, :], out.r_qstn.data)[:, 0]
    sgn_gt = sign_targets(out.n_hat_u.data, gt_q)
    s_minus = out.s_minus if feature_augmentation else None
    parts = {
        "l1": l1_sine(gt, n_pca),
        "l2": l2_z(gt, out.r_qstn) if config.use_l2 else None,
        "l3": l3_weights(out.head_points.data, gt_q, out.w_hat),
        "l4": l4_sign_bce(out.s_plus, s_minus, out.sgn_mst, sgn_gt),
        "l5": l5_contrastive(out.s_plus, out.s_minus) if (config.use_l5 and feature_augmentation
                                                          and out.s_minus is not None) else None,
    }
    return total(parts, config), parts
