import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normref import tensor as T
from normref.errors import DataError
from normref.geom import brute_knn
from normref.net import (
    ModelConfig,
    RefineNet,
    aff_fuse,
    global_feature,
    hgif_stage,
    init_params,
    lfe_block,
    normal_head,
    prepare_batch,
    project_normal,
    qstn,
    sign_head,
    stage_sizes,
)
from normref.tensor import Tensor, finite_diff_check

from conftest import toy_config


def tensors(arrays, grad=True):
    return {k: Tensor(np.array(v), requires_grad=grad, name=k) for k, v in arrays.items()}


def toy_params(seed=0, **overrides):
    return tensors(init_params(toy_config(**overrides), seed=seed))


def projection(out, seed=0):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return lambda t: T.sum(t * w)


def toy_batch(cfg, seed=0, B=2):
    rng = np.random.default_rng(seed)
    patch = rng.normal(size=(B, cfg.n_p, 3)) * [1.0, 0.7, 0.1]
    cloud = rng.normal(size=(B, cfg.n_d, 3))
    n_init = rng.normal(size=(B, 3))
    n_init /= np.linalg.norm(n_init, axis=1, keepdims=True)
    return prepare_batch(cfg, patch, cloud, n_init)


def test_desk_stage_sizes():
    cfg = ModelConfig()
    assert cfg.patch_sizes == [256, 171, 114, 76, 76]
    assert cfg.m == 76
    assert cfg.cloud_sizes == [512, 256, 128, 128]
    assert stage_sizes(700, ["2/3", "2/3", "2/3", "1"])[-1] == 208


@pytest.mark.parametrize("kwargs", [
    dict(rho_p=("2/3", "0", "2/3", "1")),
    dict(rho_d=("1/2", "3/2", "1")),
    dict(width=1),
    dict(n_p=20),
    dict(hgif_scales=(32, 32, 16)),
])
def test_config_validation(kwargs):
    with pytest.raises(DataError):
        ModelConfig(**kwargs)


def test_config_json_round_trip():
    import json
    cfg = toy_config(use_mst_init=False)
    again = ModelConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    with pytest.raises(DataError, match="unknown"):
        ModelConfig.from_dict({"n_p": 32, "bogus": 1})


def test_head_projection_has_no_bias():
    names = init_params(ModelConfig()).keys()
    assert "head.W" in names and not any(n.startswith("head.W.") or n == "head.b" for n in names)


# ---------------------------------------------------------------------------
# QSTN

def test_qstn_identity_at_init():
    P = toy_params()
    pts = Tensor(np.random.default_rng(0).normal(size=(3, 10, 3)))
    assert np.allclose(qstn(P, pts).data, np.eye(3), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_qstn_is_rotation(seed):
    rng = np.random.default_rng(seed)
    P = toy_params(seed % 1000)
    P["qstn.f2.W"].data = rng.normal(size=P["qstn.f2.W"].shape)
    R = qstn(P, Tensor(rng.normal(size=(4, 12, 3)))).data
    assert np.abs(R @ np.swapaxes(R, 1, 2) - np.eye(3)).max() < 1e-6
    assert np.abs(np.linalg.det(R) - 1).max() < 1e-6


def test_qstn_gradient():
    rng = np.random.default_rng(1)
    P = toy_params(1)
    P["qstn.f2.W"].data = rng.normal(size=P["qstn.f2.W"].shape)
    pts = Tensor(rng.normal(size=(2, 10, 3)))
    f = projection(qstn(P, pts))
    res = finite_diff_check(lambda: f(qstn(P, pts)), [P["qstn.f2.W"], P["qstn.f2.b"], P["qstn.f1.W"]])
    assert res.passed, res


def test_qstn_zero_quaternion_falls_back():
    P = toy_params()
    P["qstn.f2.b"].data = np.zeros(4)
    with pytest.warns(UserWarning, match="identity"):
        R = qstn(P, Tensor(np.random.default_rng(0).normal(size=(1, 8, 3))))
    assert np.allclose(R.data, np.eye(3))
    with pytest.raises(DataError):
        qstn(P, Tensor(np.zeros((1, 3, 3))))


# ---------------------------------------------------------------------------
# Local feature extraction and fusion

def lfe_setup(seed=0, n=16, k=4):
    rng = np.random.default_rng(seed)
    cfg = toy_config(width=8)
    P = tensors(init_params(cfg, seed))
    pts = rng.normal(size=(2, n, 3))
    return P, pts, brute_knn(pts, k), rng


def test_lfe_gradient():
    P, pts, idx, rng = lfe_setup()
    x = Tensor(pts, requires_grad=True)
    f = projection(lfe_block(P, "patch.lfe4", x, idx))
    names = [n for n in P if n.startswith("patch.lfe4.")]
    res = finite_diff_check(lambda: f(lfe_block(P, "patch.lfe4", x, idx)), [x] + [P[n] for n in names])
    assert res.passed, res


def test_lfe_identical_features_ignore_neighbours():
    P, pts, idx, rng = lfe_setup()
    same = Tensor(np.tile(pts[:, :1], (1, 16, 1)))
    a = lfe_block(P, "patch.lfe4", same, idx).data
    b = lfe_block(P, "patch.lfe4", same, rng.integers(0, 16, size=idx.shape)).data
    assert np.array_equal(a, b)


def test_lfe_neighbour_order_irrelevant():
    P, pts, idx, rng = lfe_setup()
    shuffled = np.take_along_axis(idx, rng.permuted(np.broadcast_to(np.arange(4), idx.shape), axis=2), axis=2)
    a = lfe_block(P, "patch.lfe4", Tensor(pts), idx).data
    b = lfe_block(P, "patch.lfe4", Tensor(pts), shuffled).data
    assert np.array_equal(a, b)


def test_lfe_permutation_equivariant():
    P, pts, idx, rng = lfe_setup()
    perm = rng.permutation(16)
    inv = np.argsort(perm)
    a = lfe_block(P, "patch.lfe4", Tensor(pts), idx).data
    b = lfe_block(P, "patch.lfe4", Tensor(pts[:, perm]), inv[idx[:, perm]]).data
    assert np.abs(a[:, perm] - b).max() < 1e-12


def test_lfe_rejects_bad_index():
    P, pts, idx, _ = lfe_setup()
    with pytest.raises(DataError):
        lfe_block(P, "patch.lfe4", Tensor(pts), idx + 16)


def test_aff_identities_and_gradient():
    rng = np.random.default_rng(2)
    P = toy_params(2)
    f1 = Tensor(rng.normal(size=(2, 10, 6)), requires_grad=True)
    f2 = Tensor(rng.normal(size=(2, 10, 6)), requires_grad=True)
    phi3 = lambda f: T.relu(T.linear(f, P["patch.aff.phi3.W"], P["patch.aff.phi3.b"]))  # noqa: E731
    assert np.allclose(aff_fuse(P, "patch.aff", f1, f1).data, phi3(f1).data, atol=1e-12)
    with pytest.raises(DataError):
        aff_fuse(P, "patch.aff", f1, Tensor(np.zeros((2, 9, 6))))

    f = projection(aff_fuse(P, "patch.aff", f1, f2))
    names = [n for n in P if n.startswith("patch.aff.")]
    res = finite_diff_check(lambda: f(aff_fuse(P, "patch.aff", f1, f2)), [f1, f2] + [P[n] for n in names])
    assert res.passed, res

    P["patch.aff.gate2.W"].data[:] = 0.0
    P["patch.aff.gate2.b"].data[:] = 1e3
    assert np.array_equal(aff_fuse(P, "patch.aff", f1, f2).data, phi3(f1).data)


# ---------------------------------------------------------------------------
# Hierarchical fusion

def hgif_setup(seed=0, n=24, keep=16, s=4):
    rng = np.random.default_rng(seed)
    P = toy_params(seed)
    pts = Tensor(rng.normal(size=(2, n, 3)), requires_grad=True)
    f = Tensor(rng.normal(size=(2, n, 6)), requires_grad=True)
    idx = brute_knn(pts.data, s, n_queries=keep)
    return P, pts, f, idx, rng


def test_hgif_two_stage_gradient():
    P, pts, f, idx1, rng = hgif_setup()
    idx2 = brute_knn(pts.data[:, :16], 4, n_queries=12)

    def run():
        p1, f1, g1, G1 = hgif_stage(P, "patch.stage1", 1, pts, f, None, None, idx1)
        p2, f2, g2, G2 = hgif_stage(P, "patch.stage2", 2, p1, f1, g1, G1, idx2)
        return T.concat([T.reshape(f2, (2, -1)), T.reshape(g2, (2, -1)), G1, G2], axis=1)

    proj = projection(run())
    names = [n for n in P if n.startswith(("patch.stage1.", "patch.stage2."))]
    res = finite_diff_check(lambda: proj(run()), [pts, f] + [P[n] for n in names])
    assert res.passed, res


def test_hgif_full_keep_and_zero_residual():
    P, pts, f, _, _ = hgif_setup()
    idx = brute_knn(pts.data, 4)
    P["patch.stage1.phi4.out.W"].data[:] = 0.0
    P["patch.stage1.phi4.out.b"].data[:] = 0.0
    p1, f1, _, _ = hgif_stage(P, "patch.stage1", 1, pts, f, None, None, idx)
    assert p1.shape == pts.shape
    assert np.array_equal(f1.data, f.data)


def test_hgif_even_stage_identical_features():
    P, pts, f, idx, rng = hgif_setup()
    same = Tensor(np.tile(f.data[:, :1], (1, 24, 1)))
    # f_i - f_j vanishes, so the feature weights cannot affect the local term.
    a = hgif_stage(P, "patch.stage2", 2, pts, same, None, None, idx)[2].data
    P["patch.stage2.phi7.feat"].data = rng.normal(size=P["patch.stage2.phi7.feat"].shape)
    b = hgif_stage(P, "patch.stage2", 2, pts, same, None, None, idx)[2].data
    assert np.allclose(a, b, atol=1e-12)
    c = hgif_stage(P, "patch.stage2", 2, pts, f, None, None, idx)[2].data
    assert not np.allclose(a, c)


def test_hgif_rejects_tiny_stage():
    P, pts, f, _, _ = hgif_setup()
    with pytest.raises(DataError):
        hgif_stage(P, "patch.stage1", 1, pts, f, None, None, brute_knn(pts.data, 4, n_queries=1))


def test_global_feature_permutation_invariant():
    P, pts, f, _, rng = hgif_setup()
    perm = rng.permutation(24)
    a = global_feature(P, "patch.stage1", f).data
    b = global_feature(P, "patch.stage1", Tensor(f.data[:, perm])).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Heads

def head_setup(seed=0, m=12):
    rng = np.random.default_rng(seed)
    P = toy_params(seed)
    pts = Tensor(rng.normal(size=(2, m, 3)), requires_grad=True)
    feats = Tensor(rng.normal(size=(2, m, 6)), requires_grad=True)
    return P, pts, feats, brute_knn(pts.data, 4), rng


def test_normal_head_outputs_and_gradient():
    P, pts, feats, idx, _ = head_setup()
    n, w, F_n = normal_head(P, pts, feats, idx)
    assert np.abs(np.linalg.norm(n.data, axis=1) - 1).max() < 1e-9
    assert w.shape == (2, 12) and w.data.max() == 1.0 and w.data.min() > 0

    def run():
        n, w, F = normal_head(P, pts, feats, idx)
        return T.concat([n, w, F], axis=1)

    proj = projection(run())
    names = [k for k in P if k.startswith("head.")]
    res = finite_diff_check(lambda: proj(run()), [pts, feats] + [P[k] for k in names])
    assert res.passed, res


def test_normal_head_needs_enough_points():
    P = toy_params()
    pts, feats = Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((2, 3, 6)))
    with pytest.raises(DataError):
        normal_head(P, pts, feats, np.zeros((2, 3, 4), dtype=int))


@pytest.mark.parametrize("draw", range(100))
def test_sign_correspondence(draw):
    rng = np.random.default_rng(draw)
    F = rng.normal(size=(4, 6)) * rng.uniform(0.01, 100)
    W = Tensor(init_params(toy_config(), seed=draw)["head.W"] * rng.uniform(0.1, 10))
    a = project_normal(Tensor(F), W).data
    b = project_normal(Tensor(-F), W).data
    assert np.array_equal(b, -a)


def sign_setup(seed=0):
    rng = np.random.default_rng(seed)
    P = toy_params(seed)
    F_n = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    G_p = [Tensor(rng.normal(size=(3, 6)), requires_grad=True) for _ in range(4)]
    G_d = [Tensor(rng.normal(size=(3, 6)), requires_grad=True) for _ in range(3)]
    return P, F_n, G_p, G_d


def test_sign_head_tied_logits_swap():
    P, F_n, G_p, G_d = sign_setup()
    for k in [k for k in P if k.startswith("sign.plus.")]:
        P[k.replace("plus", "minus")].data = P[k].data.copy()
    sgn = np.array([1.0, -1.0, 1.0])
    sp, sm = sign_head(P, F_n, sgn, G_p, G_d)
    fp, fm = sign_head(P, F_n, -sgn, G_p, G_d)
    assert np.array_equal(fp.data, sm.data) and np.array_equal(fm.data, sp.data)


def test_sign_head_gradient_and_errors():
    P, F_n, G_p, G_d = sign_setup()
    sgn = np.array([1.0, -1.0, 1.0])

    def run():
        sp, sm = sign_head(P, F_n, sgn, G_p, G_d)
        return T.concat([sp, sm], axis=0)

    proj = projection(run())
    names = [k for k in P if k.startswith("sign.")]
    res = finite_diff_check(lambda: proj(run()), [F_n] + G_p + G_d + [P[k] for k in names])
    assert res.passed, res
    with pytest.raises(DataError):
        sign_head(P, F_n, sgn, G_p, [])
    sp, sm = sign_head(P, F_n, sgn, G_p, G_d, dual=False)
    assert sm is None


def test_zero_logits_decide_half():
    assert float(T.sigmoid(Tensor(0.0)).data) == 0.5


# ---------------------------------------------------------------------------
# Full forward pass

def test_desk_forward_shapes():
    cfg = ModelConfig()
    model = RefineNet(cfg)
    out = model.forward(toy_batch(cfg, B=1))
    assert out.n_hat_u.shape == (1, 3)
    assert out.s_plus.shape == (1,) and out.s_minus.shape == (1,)
    assert out.w_hat.shape == (1, 76) and out.head_points.shape == (1, 76, 3)
    assert out.f_normal.shape == (1, 128)
    assert sum(p.data.size for p in model.params.values()) == 428_359


def test_toy_end_to_end_gradient():
    cfg = toy_config()
    model = RefineNet(cfg)
    rng = np.random.default_rng(5)
    model.params["qstn.f2.W"].data = rng.normal(scale=0.3, size=(5, 4))
    batch = toy_batch(cfg, seed=5)

    def run():
        out = model.forward(batch)
        return T.concat([out.n_hat_u, out.w_hat, out.f_normal, T.reshape(out.s_plus, (2, 1)),
                         T.reshape(out.s_minus, (2, 1))], axis=1)

    proj = projection(run())
    res = finite_diff_check(lambda: proj(run()), list(model.params.values()), max_coords=3,
                            rng=np.random.default_rng(0))
    assert res.passed, res


def test_forward_permutation_invariant():
    cfg = toy_config()
    model = RefineNet(cfg)
    rng = np.random.default_rng(7)
    patch = rng.normal(size=(1, 32, 3))
    cloud = rng.normal(size=(1, 32, 3))
    perm_p, perm_c = rng.permutation(32), rng.permutation(32)
    a = model.forward(prepare_batch(cfg, patch, cloud))
    b = model.forward(prepare_batch(cfg, patch[:, perm_p], cloud[:, perm_c],
                                    patch_query=int(np.argsort(perm_p)[0]),
                                    cloud_query=int(np.argsort(perm_c)[0])))
    assert np.abs(a.n_hat_u.data - b.n_hat_u.data).max() < 1e-9
    assert np.abs(a.s_plus.data - b.s_plus.data).max() < 1e-9


def test_forward_deterministic_and_stage_sets():
    cfg = toy_config()
    batch = toy_batch(cfg, seed=3)
    again = toy_batch(cfg, seed=3)
    for x, y in zip(batch.patch_stages, again.patch_stages):
        assert np.array_equal(x, y)
    model = RefineNet(cfg)
    assert np.array_equal(model.forward(batch).n_hat_u.data, model.forward(again).n_hat_u.data)


def test_mst_toggle_sets_sign_context():
    cfg = toy_config(use_mst_init=False)
    out = RefineNet(cfg).forward(toy_batch(cfg))
    assert np.array_equal(out.sgn_mst, np.ones(2))
    cfg = toy_config()
    out = RefineNet(cfg).forward(toy_batch(cfg))
    init_q = np.matmul(toy_batch(cfg).n_init[:, None, :], out.r_qstn.data)[:, 0]
    assert np.array_equal(out.sgn_mst, np.where((out.n_hat_u.data * init_q).sum(1) >= 0, 1.0, -1.0))


def test_model_rejects_bad_params():
    cfg = toy_config()
    arrays = init_params(cfg)
    arrays["head.W"] = np.zeros((2, 3))
    with pytest.raises(DataError, match="head.W"):
        RefineNet(cfg, arrays)
    arrays = init_params(cfg)
    del arrays["head.W"]
    with pytest.raises(DataError, match="missing"):
        RefineNet(cfg, arrays)


def test_prepare_batch_shape_check():
    cfg = toy_config()
    with pytest.raises(DataError):
        prepare_batch(cfg, np.zeros((1, 31, 3)), np.zeros((1, 32, 3)))
