import numpy as np
import pytest

import oracles
from gpsformer import autodiff as ad
from gpsformer.autodiff import Tensor
from gpsformer.errors import ArgumentError, ConfigError, ShapeError
from gpsformer.gpm import MHA, RCA, ADGConv, GlobalPerception, GPMConfig, adgconv, gpm_forward, mha, rca


def zero_(module):
    for p in module.parameters():
        p.data[...] = 0
    return module


def feats(rng, b, m, c, dtype=np.float32):
    return Tensor(rng.normal(size=(b, m, c)).astype(dtype))


# ------------------------------------------------------------------ ADGConv

def test_adgconv_identical_rows_identical_output():
    rng = np.random.default_rng(0)
    m = ADGConv(8, 4, rng).eval()
    zero_(m.phi)
    f = Tensor(np.tile(rng.normal(size=(1, 1, 8)), (2, 10, 1)).astype(np.float32))
    out = adgconv(f, m).data
    np.testing.assert_array_equal(out, np.broadcast_to(out[:, :1], out.shape))


def _bn_eval(bn, x):
    return (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gamma.data + bn.beta.data


def test_adgconv_zero_offset_matches_edge_conv_oracle():
    rng = np.random.default_rng(1)
    c, k = 6, 5
    m = ADGConv(c, k, rng, dtype=np.float64).eval()
    zero_(m.phi)
    for bn in (m.edge_norm, m.psi_norm):
        bn.running_mean[:] = rng.normal(size=c)
        bn.running_var[:] = rng.uniform(0.5, 2, size=c)
    f = rng.normal(size=(1, 12, c))
    w, b = m.edge.lin.w.data, m.edge.lin.b.data

    def edge_fn(x):
        h = np.maximum(_bn_eval(m.edge_norm, x @ w + b), 0)
        return _bn_eval(m.psi_norm, h @ m.psi_out.w.data + m.psi_out.b.data)

    ref = oracles.edge_conv(f[0], f[0], k, edge_fn)
    np.testing.assert_allclose(adgconv(Tensor(f), m).data[0], ref, rtol=1e-10, atol=1e-12)


def test_adgconv_offset_searches_original_features():
    rng = np.random.default_rng(2)
    m = ADGConv(4, 3, rng, dtype=np.float64).eval()
    f = Tensor(rng.normal(size=(1, 9, 4)))
    f_hat, _ = m(f)
    np.testing.assert_allclose(f_hat.data, f.data + m.phi(f).data)
    expected = oracles.knn(f_hat.data[0], f.data[0], 3)
    assert m.neighbors(f_hat, f)[0].tolist() == expected


def test_adgconv_too_few_points():
    m = ADGConv(4, 5, np.random.default_rng(0))
    with pytest.raises(ArgumentError):
        m(feats(np.random.default_rng(0), 1, 4, 4))


def test_adgconv_permutation_equivariant():
    rng = np.random.default_rng(3)
    m = ADGConv(8, 4, rng).eval()
    f = feats(rng, 1, 16, 8)
    perm = rng.permutation(16)
    a = adgconv(f, m).data
    b = adgconv(Tensor(f.data[:, perm]), m).data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-5)


# ---------------------------------------------------------------------- RCA

def test_rca_zero_projections_identity():
    rng = np.random.default_rng(4)
    m = zero_(RCA(8, rng))
    f_hat, f_a = feats(rng, 2, 5, 8), feats(rng, 2, 5, 8)
    np.testing.assert_array_equal(rca(f_hat, f_a, m).data, f_a.data)


def test_rca_zero_qk_gives_mean_of_values():
    rng = np.random.default_rng(5)
    m = RCA(4, rng, dtype=np.float64)
    zero_(m.q)
    zero_(m.k)
    f_hat, f_a = feats(rng, 1, 6, 4, np.float64), feats(rng, 1, 6, 4, np.float64)
    v = f_a.data @ m.v.w.data + m.v.b.data
    np.testing.assert_allclose(rca(f_hat, f_a, m).data, f_a.data + v.mean(axis=1, keepdims=True))


def test_rca_single_point():
    rng = np.random.default_rng(6)
    m = RCA(4, rng, dtype=np.float64)
    f_hat, f_a = feats(rng, 1, 1, 4, np.float64), feats(rng, 1, 1, 4, np.float64)
    v = f_a.data @ m.v.w.data + m.v.b.data
    np.testing.assert_allclose(rca(f_hat, f_a, m).data, f_a.data + v)


def test_rca_shape_mismatch():
    m = RCA(4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 2, 4))))


def test_rca_scale_and_permutation():
    rng = np.random.default_rng(7)
    m = RCA(8, rng)
    f_hat, f_a = feats(rng, 1, 10, 8), feats(rng, 1, 10, 8)
    perm = rng.permutation(10)
    a = rca(f_hat, f_a, m).data
    b = rca(Tensor(f_hat.data[:, perm]), Tensor(f_a.data[:, perm]), m).data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-5)


# ---------------------------------------------------------------------- MHA

def test_mha_zero_projections_identity():
    rng = np.random.default_rng(8)
    m = zero_(MHA(8, 4, rng))
    f = feats(rng, 2, 5, 8)
    np.testing.assert_array_equal(mha(f, m).data, f.data)


def test_mha_single_head_single_point():
    rng = np.random.default_rng(9)
    m = MHA(4, 1, rng, dtype=np.float64)
    f = feats(rng, 1, 1, 4, np.float64)
    v = f.data @ m.v.w.data + m.v.b.data
    np.testing.assert_allclose(mha(f, m).data, f.data + v @ m.out.w.data + m.out.b.data)


def test_mha_probability_rows_sum_to_one():
    rng = np.random.default_rng(10)
    m = MHA(8, 4, rng)
    mha(feats(rng, 2, 7, 8), m)
    assert m.last_probs.shape == (2, 4, 7, 7)
    np.testing.assert_allclose(m.last_probs.sum(-1), 1.0, atol=1e-6)


def test_mha_heads_must_divide():
    with pytest.raises(ConfigError):
        MHA(10, 4, np.random.default_rng(0))


def test_mha_uses_per_head_scale():
    rng = np.random.default_rng(11)
    m = MHA(8, 2, rng, dtype=np.float64)
    f = feats(rng, 1, 5, 8, np.float64)
    mha(f, m)
    q = (f.data @ m.q.w.data + m.q.b.data).reshape(1, 5, 2, 4).transpose(0, 2, 1, 3)
    k = (f.data @ m.k.w.data + m.k.b.data).reshape(1, 5, 2, 4).transpose(0, 2, 1, 3)
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(4)
    e = np.exp(logits - logits.max(-1, keepdims=True))
    np.testing.assert_allclose(m.last_probs, e / e.sum(-1, keepdims=True), rtol=1e-12)


# ---------------------------------------------------------------- pipeline

def test_all_toggles_off_rejected():
    with pytest.raises(ConfigError):
        GlobalPerception(8, GPMConfig(False, False, False), np.random.default_rng(0))


def test_only_adg_equals_adgconv_output():
    rng = np.random.default_rng(12)
    g = GlobalPerception(8, GPMConfig(True, False, False, k_feat=4), np.random.default_rng(1)).eval()
    f = feats(rng, 1, 10, 8)
    np.testing.assert_array_equal(gpm_forward(f, g).data, adgconv(f, g.adg).data)


def test_disabled_stages_pass_through():
    rng = np.random.default_rng(13)
    f = feats(rng, 1, 10, 8)
    g = GlobalPerception(8, GPMConfig(False, True, False), np.random.default_rng(1))
    np.testing.assert_array_equal(gpm_forward(f, g).data, rca(f, f, g.rca).data)
    g = GlobalPerception(8, GPMConfig(False, False, True), np.random.default_rng(1))
    np.testing.assert_array_equal(gpm_forward(f, g).data, mha(f, g.mha).data)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_pipeline_permutation_equivariant(dtype, tol):
    rng = np.random.default_rng(14)
    g = GlobalPerception(8, GPMConfig(k_feat=5, num_heads=4), rng, dtype=dtype).eval()
    f = feats(rng, 2, 24, 8, dtype)
    for _ in range(3):
        perm = rng.permutation(24)
        a = gpm_forward(f, g).data
        b = gpm_forward(Tensor(f.data[:, perm]), g).data
        np.testing.assert_allclose(a[:, perm], b, atol=tol, rtol=0)


def test_gpm_config_validation():
    with pytest.raises(ConfigError):
        GPMConfig(k_feat=0).validate()
    GPMConfig().validate()
