"""The refinement network: QSTN, multi-scale local features, hierarchical fusion,
the unoriented-normal head and the dual sign head.

All activations are batched as (B, N, C). Every downsampling stage keeps the
points nearest the query, and inputs are sorted by distance to the query, so
each stage's point set is a prefix of the input and survivors are slices.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import DataError
from .geom import brute_knn
from .tensor import Tensor


def _frac(x) -> Fraction:
    return Fraction(str(x)).limit_denominator(1000)


def stage_sizes(n: int, factors) -> list[int]:
    """Point counts per stage: ``[n, ceil(r1 n), ceil(r2 ceil(r1 n)), ...]``."""
    sizes = [n]
    for r in factors:
        sizes.append(math.ceil(_frac(r) * sizes[-1]))
    return sizes


@dataclass
class ModelConfig:
    n_p: int = 256
    n_d: int = 512
    rho_p: tuple = ("2/3", "2/3", "2/3", "1")
    rho_d: tuple = ("1/2", "1/2", "1")
    lfe_scales: tuple = (16, 32)
    hgif_scales: tuple = (32, 32, 16, 16)
    lfe_scale_d: int = 8
    hgif_scales_d: tuple = (16, 16, 16)
    pff_neighbors: int = 16
    width: int = 64
    normal_dim: int = 128
    qstn_width: int = 64
    pos_width: int = 16
    head_width: int = 64
    seed: int = 0
    use_mst_init: bool = True
    dual_sign_head: bool = True

    def __post_init__(self):
        for name in ("rho_p", "rho_d", "lfe_scales", "hgif_scales", "hgif_scales_d"):
            setattr(self, name, tuple(getattr(self, name)))
        self.rho_p = tuple(str(_frac(r)) for r in self.rho_p)
        self.rho_d = tuple(str(_frac(r)) for r in self.rho_d)
        self.validate()

    @property
    def patch_sizes(self) -> list[int]:
        return stage_sizes(self.n_p, self.rho_p)

    @property
    def cloud_sizes(self) -> list[int]:
        return stage_sizes(self.n_d, self.rho_d)

    @property
    def m(self) -> int:
        return self.patch_sizes[-1]

    def validate(self):
        for r in self.rho_p + self.rho_d:
            if not 0 < _frac(r) <= 1:
                raise DataError(f"downsampling factor {r} must lie in (0, 1]")
        if len(self.hgif_scales) != len(self.rho_p):
            raise DataError("hgif_scales needs one entry per patch downsampling stage")
        if len(self.hgif_scales_d) != len(self.rho_d):
            raise DataError("hgif_scales_d needs one entry per cloud downsampling stage")
        counts = [self.n_p, self.n_d, self.pff_neighbors, self.lfe_scale_d, self.width, self.normal_dim,
                  self.qstn_width, self.pos_width, self.head_width, *self.lfe_scales, *self.hgif_scales,
                  *self.hgif_scales_d]
        if min(counts) < 2:
            raise DataError("all counts and widths in the model config must be >= 2")
        for sizes, scales, label in ((self.patch_sizes, self.hgif_scales, "patch"),
                                     (self.cloud_sizes, self.hgif_scales_d, "cloud")):
            if min(sizes) < 2:
                raise DataError(f"{label} downsampling leaves fewer than 2 points: {sizes}")
            for h, s in enumerate(scales):
                if s > sizes[h]:
                    raise DataError(f"{label} stage {h + 1} scale {s} exceeds its {sizes[h]} points")
        if max(self.lfe_scales) > self.n_p or self.lfe_scale_d > self.n_d:
            raise DataError("local feature scale exceeds the point count")
        if self.m < self.pff_neighbors:
            raise DataError(f"final patch size {self.m} is below pff_neighbors={self.pff_neighbors}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise DataError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**known)


# ---------------------------------------------------------------------------
# Parameters

def _param_layout(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init) for every parameter, in a fixed order."""
    C, D, Q, E, H = cfg.width, cfg.normal_dim, cfg.qstn_width, cfg.pos_width, cfg.head_width
    L = []

    def dense(name, cin, cout, init="uniform", bias=True):
        L.append((f"{name}.W", (cin, cout), init))
        if bias:
            L.append((f"{name}.b", (cout,), "bias" if init == "uniform" else init))

    def lfe(name, cin):
        dense(f"{name}.psi", cin, C)
        for part in ("self", "nbr", "diff"):
            L.append((f"{name}.skip.main.{part}", (C, C), f"fan:{3 * C}"))
            L.append((f"{name}.skip.short.{part}", (C, C), f"fan:{3 * C}"))
        L.append((f"{name}.skip.main.b", (C,), f"fan:{3 * C}"))

    def hgif(prefix, n_stages):
        for h in range(1, n_stages + 1):
            s = f"{prefix}.stage{h}"
            dense(f"{s}.phi5", C, C)
            dense(f"{s}.phi6", C, C)
            if h % 2 == 1:
                dense(f"{s}.phi8", 3, E)
                L.append((f"{s}.phi7.feat", (E, C), f"fan:{6 + E}"))
            else:
                L.append((f"{s}.phi7.feat", (C, C), f"fan:{6 + C}"))
            fan7 = 6 + (E if h % 2 == 1 else C)
            L.append((f"{s}.phi7.pos", (3, C), f"fan:{fan7}"))
            L.append((f"{s}.phi7.rel", (3, C), f"fan:{fan7}"))
            L.append((f"{s}.phi7.b", (C,), f"fan:{fan7}"))
            for part in ("g_cur", "g_prev", "local"):
                L.append((f"{s}.phi4.{part}", (C, C), f"fan:{3 * C}"))
            L.append((f"{s}.phi4.b", (C,), f"fan:{3 * C}"))
            dense(f"{s}.phi4.out", C, C)

    # QSTN: shared point MLP -> maxpool -> MLP -> quaternion
    dense("qstn.c1", 3, Q)
    dense("qstn.c2", Q, 2 * Q)
    dense("qstn.f1", 2 * Q, Q)
    L.append(("qstn.f2.W", (Q, 4), "zeros"))
    L.append(("qstn.f2.b", (4,), "quat"))

    for s in cfg.lfe_scales:
        lfe(f"patch.lfe{s}", 3)
    if len(cfg.lfe_scales) > 1:
        dense("patch.aff.gate1", C, C)
        dense("patch.aff.gate2", C, C)
        dense("patch.aff.phi3", C, C)
    hgif("patch", len(cfg.rho_p))
    lfe(f"cloud.lfe{cfg.lfe_scale_d}", 3)
    hgif("cloud", len(cfg.rho_d))

    # unoriented normal head
    lfe("head.pff", 3)
    for part in ("feat", "pos"):
        L.append((f"head.phi2.main.{part}", (C, C), f"fan:{2 * C}"))
        L.append((f"head.phi2.short.{part}", (C, C), f"fan:{2 * C}"))
    L.append(("head.phi2.main.b", (C,), f"fan:{2 * C}"))
    dense("head.phi9.h", C, C // 2)
    dense("head.phi9.out", C // 2, 1)
    dense("head.phi10.h", C, D)
    dense("head.phi10.out", D, D)
    L.append(("head.W", (D, 3), "uniform"))

    # sign head
    dense("sign.phi12", C * len(cfg.rho_d), H)
    dense("sign.phi13", C * len(cfg.rho_p), H)
    for side in ("plus", "minus"):
        for part, cin in (("fn", D), ("fd", H), ("fp", H)):
            L.append((f"sign.{side}.{part}", (cin, H), f"fan:{D + 2 * H}"))
        L.append((f"sign.{side}.b", (H,), f"fan:{D + 2 * H}"))
        dense(f"sign.{side}.out", H, 1)
    return L


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    last_fan = {}
    for name, shape, init in _param_layout(cfg):
        if init == "zeros":
            arr = np.zeros(shape)
        elif init == "quat":
            arr = np.array([1.0, 0.0, 0.0, 0.0])
        else:
            if init.startswith("fan:"):
                fan = int(init[4:])
            elif init == "bias":
                fan = last_fan[name.rsplit(".", 1)[0]]
            else:
                fan = shape[0]
            bound = 1.0 / math.sqrt(fan)
            arr = rng.uniform(-bound, bound, size=shape)
        if name.endswith(".W"):
            last_fan[name[:-2]] = shape[0]
        params[name] = arr
    return params


# ---------------------------------------------------------------------------
# Building blocks

def _dense(P, name, x):
    return T.linear(x, P[f"{name}.W"], P[f"{name}.b"])


def _expand(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    shape.insert(axis, 1)
    return T.reshape(x, tuple(shape))


def lfe_block(P, name, feats: Tensor, idx) -> Tensor:
    """Graph local feature extraction: per-point MLP, skip block over
    (f_i, f_j, f_i - f_j) for each neighbour j, then maxpool over neighbours.

    The skip block's linear maps act on the concatenated triple; they are
    evaluated per point and gathered, which is algebraically identical.
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= feats.shape[1]):
        raise DataError(f"{name}: neighbour index out of range for {feats.shape[1]} points")
    h = T.relu(_dense(P, f"{name}.psi", feats))
    nq = idx.shape[1]
    h_q = h if nq == h.shape[1] else h[:, :nq]
    sk = f"{name}.skip"
    w_self = P[f"{sk}.main.self"] + P[f"{sk}.main.diff"]
    w_nbr = P[f"{sk}.main.nbr"] - P[f"{sk}.main.diff"]
    u_self = P[f"{sk}.short.self"] + P[f"{sk}.short.diff"]
    u_nbr = P[f"{sk}.short.nbr"] - P[f"{sk}.short.diff"]
    reduced = T.edge_max(T.linear(h_q, w_self, P[f"{sk}.main.b"]), T.linear(h, w_nbr), idx,
                         q2=T.linear(h, u_nbr))
    # The shortcut's self term is constant across neighbours, so it moves outside the max.
    return reduced + T.linear(h_q, u_self)


def aff_fuse(P, name, f1: Tensor, f2: Tensor) -> Tensor:
    """Attentional fusion with a per-channel gate from the global max of f1 + f2."""
    if f1.shape != f2.shape:
        raise DataError(f"{name}: cannot fuse shapes {f1.shape} and {f2.shape}")
    gate = aff_gate(P, name, f1, f2)
    fused = f1 * gate + f2 * (1.0 - gate)
    return T.relu(_dense(P, f"{name}.phi3", fused))


def aff_gate(P, name, f1: Tensor, f2: Tensor) -> Tensor:
    pooled = T.maxpool(f1 + f2, axis=1)
    hidden = T.relu(_dense(P, f"{name}.gate1", pooled))
    return _expand(T.sigmoid(_dense(P, f"{name}.gate2", hidden)), 1)


def global_feature(P, name, f: Tensor) -> Tensor:
    return _dense(P, f"{name}.phi6", T.maxpool(T.relu(_dense(P, f"{name}.phi5", f)), axis=1))


def hgif_stage(P, name, h: int, pts: Tensor, f: Tensor, g_prev, G_prev, idx):
    """One hierarchical fusion stage.

    ``idx`` (B, N_next, s) holds neighbours, among the current ``N_h`` points,
    of the ``N_next`` survivors (the first rows). Returns
    ``(pts_next, f_next, g_next, G_h)``.
    """
    idx = np.asarray(idx)
    n_next = idx.shape[1]
    if n_next < 2:
        raise DataError(f"{name}: downsampling leaves {n_next} points")
    G_h = global_feature(P, name, f)
    G_hm1 = G_h if G_prev is None else G_prev
    p_i = pts[:, :n_next]
    w_feat, w_rel = P[f"{name}.phi7.feat"], P[f"{name}.phi7.rel"]
    # rel @ w_rel = p_i @ w_rel - p_j @ w_rel, split into self and neighbour terms
    self_term = T.linear(p_i, P[f"{name}.phi7.pos"] + w_rel, P[f"{name}.phi7.b"])
    nbr_term = T.linear(pts, w_rel)
    if h % 2 == 1:
        rel = _expand(p_i, 2) - T.gather(pts, idx, axis=1)
        pos_emb = T.relu(_dense(P, f"{name}.phi8", rel))
        g_next = T.edge_max(self_term, -nbr_term, idx, edge=T.linear(pos_emb, w_feat))
    else:
        self_term = self_term + T.linear(f[:, :n_next], w_feat)
        g_next = T.edge_max(self_term, -(nbr_term + T.linear(f, w_feat)), idx)
    if g_prev is not None:
        g_next = g_next + g_prev[:, :n_next]
    glob = T.linear(G_h, P[f"{name}.phi4.g_cur"]) + T.linear(G_hm1, P[f"{name}.phi4.g_prev"])
    hidden = T.relu(_expand(glob, 1) + T.linear(g_next, P[f"{name}.phi4.local"], P[f"{name}.phi4.b"]))
    f_next = _dense(P, f"{name}.phi4.out", hidden) + f[:, :n_next]
    return p_i, f_next, g_next, G_h


def quaternion_to_rotation(q: Tensor) -> Tensor:
    """(B, 4) unit quaternions (w, x, y, z) -> (B, 3, 3) rotation matrices."""
    w, x, y, z = (q[:, i:i + 1] for i in range(4))
    two = 2.0
    entries = [
        1.0 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), 1.0 - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), 1.0 - two * (x * x + y * y),
    ]
    return T.reshape(T.concat(entries, axis=1), (q.shape[0], 3, 3))


def qstn(P, pts: Tensor) -> Tensor:
    if pts.shape[1] < 4:
        raise DataError(f"QSTN needs at least 4 points, got {pts.shape[1]}")
    h = T.relu(_dense(P, "qstn.c1", pts))
    h = T.relu(_dense(P, "qstn.c2", h))
    g = T.relu(_dense(P, "qstn.f1", T.maxpool(h, axis=1)))
    q = _dense(P, "qstn.f2", g)
    norms = np.linalg.norm(q.data, axis=1)
    degenerate = norms < 1e-12
    if degenerate.any():
        warnings.warn("QSTN produced a zero quaternion; falling back to the identity rotation")
        fix = np.zeros_like(q.data)
        fix[degenerate, 0] = 1.0
        q = q + fix
    return quaternion_to_rotation(T.normalize(q, axis=1))


def project_normal(F_n: Tensor, W: Tensor) -> Tensor:
    """Bias-free projection of the normal feature, normalised to unit length."""
    return T.normalize(T.linear(F_n, W), axis=-1)


def normal_head(P, pts: Tensor, feats: Tensor, idx_pff):
    """Position feature fusion + weighted pooling.

    Returns ``(n_hat_u, w_hat, F_n)``: the unit normal, per-point weights in
    (0, 1] (softmax weights rescaled by their maximum) and the normal feature.
    """
    m = feats.shape[1]
    if np.asarray(idx_pff).shape[-1] > m:
        raise DataError(f"normal head: {m} points is fewer than the PFF neighbour count")
    pos = lfe_block(P, "head.pff", pts, idx_pff)
    main = T.relu(T.linear(feats, P["head.phi2.main.feat"]) + T.linear(pos, P["head.phi2.main.pos"],
                                                                        P["head.phi2.main.b"]))
    fused = main + T.linear(feats, P["head.phi2.short.feat"]) + T.linear(pos, P["head.phi2.short.pos"])
    scores = _dense(P, "head.phi9.out", T.relu(_dense(P, "head.phi9.h", fused)))
    weights = T.softmax(scores, axis=1)
    w_hat = T.reshape(T.exp(scores - T.maxpool(scores, axis=1, keepdims=True)), (scores.shape[0], m))
    hidden = T.relu(_dense(P, "head.phi10.h", fused * weights))
    F_n = T.maxpool(_dense(P, "head.phi10.out", hidden), axis=1)
    return project_normal(F_n, P["head.W"]), w_hat, F_n


def _sign_logit(P, side, F_sign, F_D, F_P):
    pre = (T.linear(F_sign, P[f"sign.{side}.fn"]) + T.linear(F_D, P[f"sign.{side}.fd"])
           + T.linear(F_P, P[f"sign.{side}.fp"], P[f"sign.{side}.b"]))
    out = _dense(P, f"sign.{side}.out", T.relu(pre))
    return T.reshape(out, (out.shape[0],))


def sign_head(P, F_n: Tensor, sgn_mst, G_patch, G_cloud, dual: bool = True):
    """Logits for "keep the initial sign" from the projected and the negated feature."""
    if not G_patch or not G_cloud:
        raise DataError("sign head needs global features from both branches")
    F_P = T.relu(_dense(P, "sign.phi13", T.concat(G_patch, axis=-1)))
    F_D = T.relu(_dense(P, "sign.phi12", T.concat(G_cloud, axis=-1)))
    F_plus = F_n * np.asarray(sgn_mst, dtype=np.float64).reshape(-1, 1)
    s_plus = _sign_logit(P, "plus", F_plus, F_D, F_P)
    s_minus = _sign_logit(P, "minus", -F_plus, F_D, F_P) if dual else None
    return s_plus, s_minus


# ---------------------------------------------------------------------------
# Batches and the full forward pass

@dataclass
class Batch:
    patch: np.ndarray          # (B, n_p, 3), PCA frame, sorted by distance to the query
    cloud: np.ndarray          # (B, n_d, 3), same frame and ordering rule
    n_init: np.ndarray | None  # (B, 3) initial oriented normal in the PCA frame
    patch_lfe: list = field(default_factory=list)
    patch_stages: list = field(default_factory=list)
    patch_pff: np.ndarray | None = None
    cloud_lfe: np.ndarray | None = None
    cloud_stages: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patch)


def _sort_by_query(pts, query_idx):
    q = pts[np.arange(len(pts)), np.asarray(query_idx)][:, None, :]
    d2 = ((pts - q) ** 2).sum(axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")
    return np.take_along_axis(pts, order[..., None], axis=1)


def prepare_batch(cfg: ModelConfig, patch, cloud, n_init=None, patch_query=0, cloud_query=0) -> Batch:
    """Sort inputs by distance to their query point and precompute all k-NN graphs."""
    patch = np.asarray(patch, dtype=np.float64)
    cloud = np.asarray(cloud, dtype=np.float64)
    B = len(patch)
    if patch.shape[1:] != (cfg.n_p, 3) or cloud.shape[1:] != (cfg.n_d, 3) or len(cloud) != B:
        raise DataError(f"batch shapes {patch.shape}/{cloud.shape} do not match n_p={cfg.n_p}, n_d={cfg.n_d}")
    patch = _sort_by_query(patch, np.broadcast_to(patch_query, (B,)))
    cloud = _sort_by_query(cloud, np.broadcast_to(cloud_query, (B,)))
    batch = Batch(patch, cloud, None if n_init is None else np.asarray(n_init, dtype=np.float64))
    batch.patch_lfe = [brute_knn(patch, s) for s in cfg.lfe_scales]
    sizes = cfg.patch_sizes
    for h, s in enumerate(cfg.hgif_scales):
        src = patch[:, :sizes[h]]
        batch.patch_stages.append(brute_knn(src, s, n_queries=sizes[h + 1]))
    batch.patch_pff = brute_knn(patch[:, :sizes[-1]], cfg.pff_neighbors)
    batch.cloud_lfe = brute_knn(cloud, cfg.lfe_scale_d)
    csizes = cfg.cloud_sizes
    for h, s in enumerate(cfg.hgif_scales_d):
        batch.cloud_stages.append(brute_knn(cloud[:, :csizes[h]], s, n_queries=csizes[h + 1]))
    return batch


@dataclass
class ForwardOutput:
    n_hat_u: Tensor        # (B, 3) unit normal in the QSTN frame
    r_qstn: Tensor         # (B, 3, 3)
    w_hat: Tensor          # (B, M)
    f_normal: Tensor       # (B, normal_dim)
    s_plus: Tensor         # (B,)
    s_minus: Tensor | None
    g_patch: list
    g_cloud: list
    sgn_mst: np.ndarray    # (B,) in {+1, -1}
    head_points: Tensor    # (B, M, 3) final patch points in the QSTN frame

    def normal_pca_frame(self) -> np.ndarray:
        """Unoriented prediction mapped back through the QSTN rotation."""
        return np.matmul(self.n_hat_u.data[:, None, :], np.swapaxes(self.r_qstn.data, 1, 2))[:, 0]

    def sign_decision(self) -> np.ndarray:
        """+1 keeps the initial sign, -1 flips it."""
        p_plus = 1.0 / (1.0 + np.exp(-self.s_plus.data))
        if self.s_minus is None:
            return np.where(p_plus >= 0.5, 1.0, -1.0)
        p_minus = 1.0 / (1.0 + np.exp(-self.s_minus.data))
        return np.where(p_plus >= p_minus, 1.0, -1.0)


def _branch(P, prefix, pts: Tensor, lfe_idx, scales, stage_idx):
    feats = [lfe_block(P, f"{prefix}.lfe{s}", pts, idx) for s, idx in zip(scales, lfe_idx)]
    f = feats[0] if len(feats) == 1 else aff_fuse(P, f"{prefix}.aff", feats[0], feats[1])
    g, G_prev, globals_ = None, None, []
    for h, idx in enumerate(stage_idx, start=1):
        pts, f, g, G_prev = hgif_stage(P, f"{prefix}.stage{h}", h, pts, f, g, G_prev, idx)
        globals_.append(G_prev)
    return pts, f, globals_


class RefineNet:
    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        arrays = init_params(config) if params is None else params
        expected = {name: shape for name, shape, _ in _param_layout(config)}
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise DataError(f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in arrays.items():
            if tuple(np.shape(arr)) != tuple(expected[name]):
                raise DataError(f"parameter {name} has shape {np.shape(arr)}, expected {expected[name]}")
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                       for k, v in arrays.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, batch: Batch) -> ForwardOutput:
        cfg, P = self.config, self.params
        r_q = qstn(P, Tensor(batch.patch))
        patch = T.matmul(Tensor(batch.patch), r_q)
        cloud = T.matmul(Tensor(batch.cloud), r_q)

        p_pts, p_feat, g_patch = _branch(P, "patch", patch, batch.patch_lfe, cfg.lfe_scales, batch.patch_stages)
        _, _, g_cloud = _branch(P, "cloud", cloud, [batch.cloud_lfe], (cfg.lfe_scale_d,), batch.cloud_stages)

        n_hat_u, w_hat, F_n = normal_head(P, p_pts, p_feat, batch.patch_pff)
        if cfg.use_mst_init and batch.n_init is not None:
            init_q = np.matmul(batch.n_init[:, None, :], r_q.data)[:, 0]
            sgn = np.where((n_hat_u.data * init_q).sum(axis=1) >= 0, 1.0, -1.0)
        else:
            sgn = np.ones(len(batch))
        s_plus, s_minus = sign_head(P, F_n, sgn, g_patch, g_cloud, dual=cfg.dual_sign_head)
        return ForwardOutput(n_hat_u, r_q, w_hat, F_n, s_plus, s_minus, g_patch, g_cloud, sgn, p_pts)
