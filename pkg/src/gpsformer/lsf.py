"""Local structure fitting convolution.

Each neighbourhood is summarised by a low-order branch (pointwise MLP and max
pool, blind to the centre) plus a high-order branch that pools a signed power
of geometry-weighted feature differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .geometry import ball_query, gather_points, relation_encode
from .nn import MLP, Module, Parameter

BASIS_MODES = ("abf", "rbf", "s0_learnable", "s1_learnable")


@dataclass(frozen=True)
class BasisMode:
    s: int
    p_init: float
    learnable: bool
    centered: bool = True


def basis_mode(name, p_init=1.0):
    """Map a mode name to its signed-power settings.

    >>> basis_mode("rbf")
    BasisMode(s=0, p_init=2.0, learnable=False, centered=True)
    """
    if name == "abf":
        return BasisMode(1, 1.0, False, centered=False)
    if name == "rbf":
        return BasisMode(0, 2.0, False)
    if name == "s0_learnable":
        return BasisMode(0, float(p_init), True)
    if name == "s1_learnable":
        return BasisMode(1, float(p_init), True)
    raise ConfigError(f"unknown basis mode {name!r}; expected one of {BASIS_MODES}")


@dataclass
class ScaleSpec:
    radius: float
    k: int

    def __post_init__(self):
        if self.radius <= 0 or self.k < 1:
            raise ConfigError(f"scale needs radius > 0 and k >= 1, got {self.radius}, {self.k}")


def default_scales():
    return [ScaleSpec(0.1, 8), ScaleSpec(0.2, 16), ScaleSpec(0.4, 32)]


@dataclass
class LSFConfig:
    basis_mode: str = "s1_learnable"
    scales: list = field(default_factory=default_scales)
    p_init: float = 1.0
    p_clamp: tuple = (0.1, 4.0)

    def __post_init__(self):
        self.scales = [s if isinstance(s, ScaleSpec) else ScaleSpec(**s) for s in self.scales]
        self.p_clamp = tuple(self.p_clamp)

    def validate(self):
        basis_mode(self.basis_mode, self.p_init)
        if not self.scales:
            raise ConfigError("at least one neighbourhood scale is required")
        lo, hi = self.p_clamp
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid p_clamp {self.p_clamp}")


class LOConv(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.phi = MLP([cin, cout, cout], rng, dtype=dtype)

    def forward(self, neighbor_feats, valid):
        return ad.masked_max_pool(self.phi(neighbor_feats), valid)

    def forward_gathered(self, source_feats, idx, valid):
        # phi is pointwise, so apply it once per source point and gather after
        return ad.masked_max_pool(ad.gather_rows(self.phi(source_feats), idx), valid)


class HOConv(Module):
    def __init__(self, cin, cout, mode: BasisMode, rng, dtype=np.float32):
        self.xi = MLP([10, cin, cin], rng, dtype=dtype)
        self.p = Parameter(np.asarray(mode.p_init, dtype=dtype), trainable=mode.learnable)
        self.fuse = MLP([cin, 2 * cout, cout], rng, dtype=dtype)
        self.mode = mode
        self.last_pooled = None

    def basis(self, center_feats, neighbor_feats, relation):
        """Per-neighbour signed-power response ``[.., M, K, Cin]``."""
        w = self.xi(relation)
        if w.shape != neighbor_feats.shape:
            raise ShapeError(f"weights {w.shape} do not match neighbour features {neighbor_feats.shape}")
        if self.mode.centered:
            c = center_feats
            c = ad.reshape(c, c.shape[:-1] + (1, c.shape[-1]))
            diff = ad.sub(neighbor_feats, c)
        else:
            diff = neighbor_feats
        return ad.signed_power(ad.mul(w, diff), self.mode.s, self.p)

    def forward(self, center_feats, neighbor_feats, relation, valid):
        pooled = ad.masked_max_pool(self.basis(center_feats, neighbor_feats, relation), valid)
        self.last_pooled = pooled.data
        return self.fuse(pooled)


class LSFConv(Module):
    """Multi-scale local fitting around sampled centres.

    Per scale: ball query, low-order + high-order responses summed; scales are
    concatenated and projected to ``cout``.
    """

    def __init__(self, cin, cout, cfg: LSFConfig, rng, dtype=np.float32):
        cfg.validate()
        mode = basis_mode(cfg.basis_mode, cfg.p_init)
        self.scales = list(cfg.scales)
        self.lo = [LOConv(cin, cout, rng, dtype=dtype) for _ in self.scales]
        self.ho = [HOConv(cin, cout, mode, rng, dtype=dtype) for _ in self.scales]
        self.proj = MLP([len(self.scales) * cout, cout], rng, final_act=True, dtype=dtype)
        self.last_concat_width = None

    def forward(self, pos, feats, query_ids):
        center_pos = gather_points(pos, query_ids)
        center_feats = ad.gather_rows(feats, query_ids)
        outs = []
        for spec, lo, ho in zip(self.scales, self.lo, self.ho):
            table = ball_query(center_pos, pos, spec.radius, spec.k)
            valid = table.valid
            nbr = ad.gather_rows(feats, table.indices)
            rel = relation_encode(center_pos, gather_points(pos, table.indices)).astype(feats.dtype)
            low = lo.forward_gathered(feats, table.indices, valid)
            high = ho(center_feats, nbr, Tensor(rel), valid)
            outs.append(ad.add(low, high))
        cat = ad.concat(outs, axis=-1)
        self.last_concat_width = cat.shape[-1]
        return self.proj(cat)


def loconv(neighbor_feats, valid, params: LOConv):
    return params(ad.as_tensor(neighbor_feats), valid)


def hoconv(center_feats, neighbor_feats, relation, valid, params: HOConv):
    return params(ad.as_tensor(center_feats), ad.as_tensor(neighbor_feats), ad.as_tensor(relation), valid)


def lsfconv(positions, feats, query_ids, params: LSFConv):
    return params(np.asarray(positions), ad.as_tensor(feats), np.asarray(query_ids))


def clamp_exponents(module, lo, hi):
    """Clip every learnable exponent into ``[lo, hi]`` (run after each optimiser step)."""
    for name, p in module.named_parameters():
        if name.endswith(".p") and p.trainable:
            np.clip(p.data, lo, hi, out=p.data)
