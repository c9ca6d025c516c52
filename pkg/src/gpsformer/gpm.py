"""Global perception: deformable feature-space graph convolution + attention.

Features are batched ``[B, M, C]`` tensors; every operator here is
permutation-equivariant over the M axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, ConfigError, ShapeError
from .geometry import knn
from .nn import BatchNorm, Linear, MLP, Module


@dataclass
class GPMConfig:
    use_adgconv: bool = True
    use_rca: bool = True
    use_mha: bool = True
    k_feat: int = 20
    num_heads: int = 4

    def validate(self):
        if not (self.use_adgconv or self.use_rca or self.use_mha):
            raise ConfigError("global perception needs at least one of adgconv/rca/mha enabled")
        if self.k_feat < 1:
            raise ConfigError(f"k_feat must be >= 1, got {self.k_feat}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")


class EdgeLinear(Module):
    """First edge-MLP layer applied to ``[centre, neighbour - centre]``.

    Since the layer is linear, ``W_a c + W_b (n - c) = (W_a - W_b) c + W_b n``:
    both terms are computed per point and only their sum is formed per edge.
    """

    def __init__(self, c, cout, rng, dtype=np.float32):
        self.lin = Linear(2 * c, cout, rng, dtype=dtype)
        self.c = c

    def forward(self, centre, source, idx):
        w = self.lin.w
        w_nbr = _slice_rows(w, self.c, 2 * self.c)
        centre_term = ad.linear(centre, ad.sub(_slice_rows(w, 0, self.c), w_nbr), self.lin.b)
        nbr_term = ad.linear(source, w_nbr)
        gathered = ad.gather_rows(nbr_term, idx)                 # [B, M, K, C']
        return ad.add(ad.reshape(centre_term, centre_term.shape[:2] + (1, centre_term.shape[-1])),
                      gathered)


def _slice_rows(t, lo, hi):
    """Differentiable row slice of a 2-D tensor."""
    data = t.data[lo:hi]

    def backward(g):
        full = np.zeros_like(t.data)
        full[lo:hi] = g
        return (full,)

    return ad._result(data, (t,), backward)


class ADGConv(Module):
    """Offset the centre feature, search K neighbours among the original
    features, aggregate ``psi([f_hat, f_j - f_hat])`` by max pooling.

    Returns ``(f_hat, f_a)``.
    """

    def __init__(self, c, k_feat, rng, dtype=np.float32):
        self.phi = MLP([c, c, c], rng, dtype=dtype)
        self.edge = EdgeLinear(c, c, rng, dtype=dtype)
        self.edge_norm = BatchNorm(c, dtype=dtype)
        self.psi_out = Linear(c, c, rng, dtype=dtype)
        self.psi_norm = BatchNorm(c, dtype=dtype)
        self.k_feat = k_feat

    def neighbors(self, f_hat, f):
        return knn(f_hat.data, f.data, self.k_feat).indices

    def forward(self, f):
        m = f.shape[1]
        if m < self.k_feat:
            raise ArgumentError(f"adgconv needs at least k_feat={self.k_feat} points, got {m}")
        f_hat = ad.add(f, self.phi(f))
        idx = self.neighbors(f_hat, f)
        h = ad.relu(self.edge_norm(self.edge(f_hat, f, idx)))
        h = self.psi_norm(self.psi_out(h))
        return f_hat, ad.masked_max_pool(h)


def attention(q, k, v, scale):
    """Scaled dot-product attention over the M axis; returns ``(out, probs)``."""
    logits = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale)
    probs = ad.softmax(logits, axis=-1)
    return ad.matmul(probs, v), probs


class RCA(Module):
    """Residual cross-attention: queries from the offset features, keys and
    values from the graph-convolution output, plus a residual."""

    def __init__(self, c, rng, dtype=np.float32):
        self.q = Linear(c, c, rng, dtype=dtype)
        self.k = Linear(c, c, rng, dtype=dtype)
        self.v = Linear(c, c, rng, dtype=dtype)
        self.c = c
        self.last_probs = None

    def forward(self, f_hat, f_a):
        if f_hat.shape != f_a.shape:
            raise ShapeError(f"rca inputs differ in shape: {f_hat.shape} vs {f_a.shape}")
        out, probs = attention(self.q(f_hat), self.k(f_a), self.v(f_a), 1.0 / np.sqrt(self.c))
        self.last_probs = probs.data
        return ad.add(f_a, out)


class MHA(Module):
    """Multi-head self-attention with output projection and residual."""

    def __init__(self, c, num_heads, rng, dtype=np.float32):
        if c % num_heads:
            raise ConfigError(f"width {c} is not divisible by {num_heads} heads")
        self.q = Linear(c, c, rng, dtype=dtype)
        self.k = Linear(c, c, rng, dtype=dtype)
        self.v = Linear(c, c, rng, dtype=dtype)
        self.out = Linear(c, c, rng, dtype=dtype)
        self.c, self.heads = c, num_heads
        self.last_probs = None

    def _split(self, x):
        b, m, _ = x.shape
        x = ad.reshape(x, (b, m, self.heads, self.c // self.heads))
        return ad.swapaxes(x, 1, 2)                                 # [B, H, M, Ch]

    def forward(self, f_r):
        b, m, c = f_r.shape
        q, k, v = self._split(self.q(f_r)), self._split(self.k(f_r)), self._split(self.v(f_r))
        out, probs = attention(q, k, v, 1.0 / np.sqrt(c // self.heads))
        self.last_probs = probs.data
        out = ad.reshape(ad.swapaxes(out, 1, 2), (b, m, c))
        return ad.add(f_r, self.out(out))


class GlobalPerception(Module):
    """ADGConv -> RCA -> MHA; disabled stages pass their input through."""

    def __init__(self, c, cfg: GPMConfig, rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.adg = ADGConv(c, cfg.k_feat, rng, dtype=dtype) if cfg.use_adgconv else None
        self.rca = RCA(c, rng, dtype=dtype) if cfg.use_rca else None
        self.mha = MHA(c, cfg.num_heads, rng, dtype=dtype) if cfg.use_mha else None

    def forward(self, f):
        if self.adg is not None:
            f_hat, f_a = self.adg(f)
        else:
            f_hat, f_a = f, f
        f_r = self.rca(f_hat, f_a) if self.rca is not None else f_a
        return self.mha(f_r) if self.mha is not None else f_r


def adgconv(feats, params: ADGConv):
    return params(ad.as_tensor(feats))[1]


def rca(f_hat, f_a, params: RCA):
    return params(ad.as_tensor(f_hat), ad.as_tensor(f_a))


def mha(f_r, params: MHA):
    return params(ad.as_tensor(f_r))


def gpm_forward(feats, params: GlobalPerception):
    return params(ad.as_tensor(feats))
