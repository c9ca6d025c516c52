import numpy as np
import pytest

from gpsformer import autodiff as ad
from gpsformer.autodiff import Tape, Tensor
from gpsformer.errors import AggregationError, ConfigError, ShapeError
from gpsformer.lsf import (HOConv, LOConv, LSFConfig, LSFConv, ScaleSpec, basis_mode, clamp_exponents, hoconv,
                           loconv)


def zero_(module):
    for p in module.parameters():
        p.data[...] = 0
    return module


# --------------------------------------------------------------- basis modes

def test_basis_mode_table():
    assert basis_mode("s1_learnable") == basis_mode("s1_learnable", 1.0)
    m = basis_mode("s1_learnable")
    assert (m.s, m.p_init, m.learnable, m.centered) == (1, 1.0, True, True)
    m = basis_mode("s0_learnable", 1.5)
    assert (m.s, m.p_init, m.learnable) == (0, 1.5, True)
    m = basis_mode("abf")
    assert (m.s, m.p_init, m.learnable, m.centered) == (1, 1.0, False, False)
    m = basis_mode("rbf")
    assert (m.s, m.p_init, m.learnable, m.centered) == (0, 2.0, False, True)
    with pytest.raises(ConfigError):
        basis_mode("taylor")


@pytest.mark.parametrize("name,trainable", [("abf", False), ("rbf", False), ("s0_learnable", True),
                                            ("s1_learnable", True)])
def test_exponent_trainability(name, trainable):
    h = HOConv(4, 4, basis_mode(name), np.random.default_rng(0))
    assert h.p.trainable is trainable
    assert h.p.data.shape == ()


def _random_group(rng, m=5, k=6, c=4, dtype=np.float64):
    ci = Tensor(rng.normal(size=(m, c)).astype(dtype))
    nb = Tensor(rng.normal(size=(m, k, c)).astype(dtype))
    rel = Tensor(rng.uniform(-1, 1, size=(m, k, 10)).astype(dtype))
    return ci, nb, rel


def test_abf_is_weighted_neighbour():
    rng = np.random.default_rng(1)
    h = HOConv(4, 4, basis_mode("abf"), rng, dtype=np.float64).eval()
    ci, nb, rel = _random_group(rng)
    w = h.xi(rel).data
    np.testing.assert_allclose(h.basis(ci, nb, rel).data, w * nb.data, atol=1e-12)


def test_rbf_is_squared_weighted_difference():
    rng = np.random.default_rng(2)
    h = HOConv(4, 4, basis_mode("rbf"), rng, dtype=np.float64).eval()
    ci, nb, rel = _random_group(rng)
    w = h.xi(rel).data
    expected = np.abs(w * (nb.data - ci.data[:, None])) ** 2
    np.testing.assert_allclose(h.basis(ci, nb, rel).data, expected, atol=1e-12)


def test_hoconv_identical_features_annihilate():
    rng = np.random.default_rng(3)
    h = HOConv(4, 3, basis_mode("s1_learnable", 1.7), rng).eval()
    f = rng.normal(size=(1, 4)).astype(np.float32)
    ci = Tensor(np.repeat(f, 5, axis=0))
    nb = Tensor(np.repeat(ci.data[:, None], 6, axis=1))
    rel = Tensor(rng.uniform(-1, 1, size=(5, 6, 10)).astype(np.float32))
    out = hoconv(ci, nb, rel, np.ones((5, 6), bool), h)
    assert np.all(h.last_pooled == 0)
    np.testing.assert_array_equal(out.data, h.fuse(Tensor(np.zeros((5, 4), np.float32))).data)


def test_hoconv_shape_mismatch():
    rng = np.random.default_rng(4)
    h = HOConv(4, 3, basis_mode("abf"), rng)
    with pytest.raises(ShapeError):
        h.basis(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3, 5))), Tensor(np.zeros((2, 3, 10))))


def test_exponent_gradient_nonzero_when_learnable():
    rng = np.random.default_rng(5)
    h = HOConv(4, 3, basis_mode("s1_learnable", 1.3), rng, dtype=np.float64)
    ci, nb, rel = _random_group(rng)
    with Tape() as tape:
        loss = ad.tsum(h(ci, nb, rel, np.ones((5, 6), bool)))
    tape.backward(loss)
    assert h.p.grad is not None and abs(float(h.p.grad)) > 0


# -------------------------------------------------------------------- LOConv

def test_loconv_identical_neighbours():
    rng = np.random.default_rng(6)
    lo = LOConv(4, 5, rng).eval()
    f = rng.normal(size=(3, 1, 4)).astype(np.float32)
    out = loconv(np.repeat(f, 4, axis=1), np.ones((3, 4), bool), lo)
    np.testing.assert_allclose(out.data, lo.phi(Tensor(f[:, 0])).data, rtol=1e-6)


def test_loconv_single_neighbour():
    rng = np.random.default_rng(7)
    lo = LOConv(4, 5, rng).eval()
    f = rng.normal(size=(3, 1, 4)).astype(np.float32)
    np.testing.assert_allclose(loconv(f, np.ones((3, 1), bool), lo).data, lo.phi(Tensor(f[:, 0])).data, rtol=1e-6)


def test_padding_is_neutral():
    rng = np.random.default_rng(8)
    lo = LOConv(4, 5, rng, dtype=np.float64).eval()
    ho = HOConv(4, 5, basis_mode("s1_learnable", 1.4), rng, dtype=np.float64).eval()
    ci, nb, rel = _random_group(rng, m=3, k=3)
    valid = np.ones((3, 3), bool)
    pad_nb = Tensor(np.concatenate([nb.data, np.repeat(nb.data[:, :1], 2, axis=1)], axis=1))
    pad_rel = Tensor(np.concatenate([rel.data, np.repeat(rel.data[:, :1], 2, axis=1)], axis=1))
    pad_valid = np.concatenate([valid, np.zeros((3, 2), bool)], axis=1)
    np.testing.assert_array_equal(lo(nb, valid).data, lo(pad_nb, pad_valid).data)
    np.testing.assert_array_equal(ho(ci, nb, rel, valid).data, ho(ci, pad_nb, pad_rel, pad_valid).data)
    # replicated padding marked valid is also harmless for max pooling
    np.testing.assert_array_equal(lo(nb, valid).data, lo(pad_nb, np.ones((3, 5), bool)).data)


def test_loconv_empty_group():
    lo = LOConv(2, 2, np.random.default_rng(0))
    with pytest.raises(AggregationError):
        lo(Tensor(np.zeros((2, 3, 2), np.float32)), np.zeros((2, 3), bool))


def test_gathered_low_order_matches_per_neighbour_in_eval():
    rng = np.random.default_rng(9)
    lo = LOConv(4, 5, rng, dtype=np.float64).eval()
    src = Tensor(rng.normal(size=(2, 10, 4)))
    idx = rng.integers(0, 10, size=(2, 3, 4))
    valid = np.ones((2, 3, 4), bool)
    a = lo.forward_gathered(src, idx, valid).data
    b = lo(ad.gather_rows(src, idx), valid).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


# -------------------------------------------------------------------- LSFConv

def _cloud(rng, b=2, n=32, c=6, dtype=np.float32):
    pos = rng.uniform(-0.5, 0.5, size=(b, n, 3))
    return pos, Tensor(rng.normal(size=(b, n, c)).astype(dtype))


def test_lsfconv_concat_width_and_output_shape():
    rng = np.random.default_rng(10)
    conv = LSFConv(6, 8, LSFConfig(), rng)
    pos, f = _cloud(rng)
    q = np.stack([np.arange(0, 32, 4)] * 2)
    out = conv(pos, f, q)
    assert conv.last_concat_width == 3 * 8
    assert out.shape == (2, 8, 8)


def test_lsfconv_high_order_zeroed_reduces_to_projected_low_order():
    rng = np.random.default_rng(11)
    conv = LSFConv(6, 8, LSFConfig(scales=[ScaleSpec(0.3, 8)]), rng, dtype=np.float64).eval()
    zero_(conv.ho[0].fuse)
    pos, f = _cloud(rng, dtype=np.float64)
    q = np.stack([np.arange(0, 32, 4)] * 2)
    from gpsformer.geometry import ball_query, gather_points
    tab = ball_query(gather_points(pos, q), pos, 0.3, 8)
    low = conv.lo[0].forward_gathered(f, tab.indices, tab.valid)
    np.testing.assert_allclose(conv(pos, f, q).data, conv.proj(low).data, rtol=1e-12)


def test_lsfconv_duplicate_point_cloud_annihilates_every_scale():
    rng = np.random.default_rng(12)
    conv = LSFConv(6, 8, LSFConfig(), rng).eval()
    pos = np.zeros((1, 16, 3))
    f = Tensor(np.tile(rng.normal(size=(1, 1, 6)), (1, 16, 1)).astype(np.float32))
    conv(pos, f, np.arange(0, 16, 2)[None])
    for ho in conv.ho:
        assert np.all(ho.last_pooled == 0)


def test_lsf_config_validation():
    with pytest.raises(ConfigError):
        ScaleSpec(0.0, 4)
    with pytest.raises(ConfigError):
        LSFConfig(scales=[]).validate()
    with pytest.raises(ConfigError):
        LSFConfig(p_clamp=(2.0, 1.0)).validate()
    with pytest.raises(ConfigError):
        LSFConfig(basis_mode="nope").validate()


def test_clamp_exponents():
    rng = np.random.default_rng(13)
    conv = LSFConv(4, 4, LSFConfig(), rng)
    conv.ho[0].p.data[...] = 9.0
    conv.ho[1].p.data[...] = -1.0
    clamp_exponents(conv, 0.1, 4.0)
    assert float(conv.ho[0].p.data) == 4.0 and abs(float(conv.ho[1].p.data) - 0.1) < 1e-7
    fixed = LSFConv(4, 4, LSFConfig(basis_mode="rbf"), rng)
    clamp_exponents(fixed, 0.1, 1.0)
    assert float(fixed.ho[0].p.data) == 2.0
