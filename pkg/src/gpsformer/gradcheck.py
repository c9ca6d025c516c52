"""Central finite-difference checks for every differentiable operation.

Each case builds float64 leaves and a closure producing a tensor; the scalar
checked is ``sum(out * W)`` with a fixed random ``W`` so upstream gradients
are not uniform. Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module

H = 1e-5
TOL = 1e-4
FLOOR = 1e-4
DTYPE = np.float64


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    passed: bool
    seconds: float

    def to_dict(self):
        return {"name": self.name, "max_rel_err": self.max_rel_err, "checked": self.checked,
                "passed": self.passed, "seconds": round(self.seconds, 4)}


def rel_err(analytic, numeric, floor=FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def leaf(rng, shape, lo=-2.0, hi=2.0, min_abs=0.0):
    """Uniform float64 leaf in ``[lo, hi]``, kept at least ``min_abs`` away from 0."""
    x = rng.uniform(lo, hi, size=shape)
    if min_abs > 0:
        x = np.where(np.abs(x) < min_abs, np.sign(x + 1e-12) * min_abs + x, x)
    return Tensor(x.astype(DTYPE), requires_grad=True)


def check(name, fn, leaves, h=H, tol=TOL, seed=0, max_entries=None):
    """Compare tape gradients of ``sum(fn() * W)`` with central differences.

    ``max_entries`` bounds the number of perturbed entries per leaf (chosen
    at random) to keep large composite cases fast.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        probe = fn()
    weight = rng.uniform(0.5, 1.5, size=probe.shape) * rng.choice([-1.0, 1.0], size=probe.shape)

    def scalar():
        with ad.no_grad():
            return float(np.sum(fn().data * weight))

    for t in leaves:
        t.grad = None
    with ad.Tape() as tape:
        loss = ad.tsum(ad.mul(fn(), weight))
    tape.backward(loss)

    worst, count = 0.0, 0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        ids = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            ids = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(ids.size)
        for j, i in enumerate(ids):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        worst = max(worst, rel_err(analytic.reshape(-1)[ids], numeric))
        count += ids.size
    return GradCheckResult(name, worst, count, worst < tol, time.perf_counter() - t0)


def _module_leaves(module: Module):
    return [p for p in module.parameters() if p.trainable]


# ----------------------------------------------------------------------- cases

def _cases():
    """Yield ``(name, builder)``; a builder maps an rng to ``(fn, leaves, kwargs)``."""

    def binary(op, sa, sb):
        def build(rng):
            a, b = leaf(rng, sa), leaf(rng, sb)
            return (lambda: op(a, b)), [a, b], {}
        return build

    yield "add", binary(ad.add, (3, 4), (4,))
    yield "sub", binary(ad.sub, (2, 3, 4), (3, 1))
    yield "mul", binary(ad.mul, (2, 3, 4), (1, 4))
    yield "matmul", binary(ad.matmul, (2, 3, 4), (4, 5))

    def relu(rng):
        x = leaf(rng, (4, 5), min_abs=0.1)
        return (lambda: ad.relu(x)), [x], {}
    yield "relu", relu

    for s in (0, 1):
        def spow(rng, s=s):
            u = leaf(rng, (3, 4), min_abs=0.1)
            p = Tensor(np.asarray(rng.uniform(0.5, 2.5)), requires_grad=True)
            return (lambda: ad.signed_power(u, s, p)), [u, p], {}
        yield f"signed_power_s{s}", spow

    def spow_point(rng):
        u = Tensor(np.array([2.0]), requires_grad=True)
        p = Tensor(np.asarray(1.5), requires_grad=True)
        return (lambda: ad.signed_power(u, 1, p)), [u, p], {}
    yield "signed_power_dp_u2_p1.5", spow_point

    def linear(rng):
        x, w, b = leaf(rng, (2, 3, 4)), leaf(rng, (4, 5)), leaf(rng, (5,))
        return (lambda: ad.linear(x, w, b)), [x, w, b], {}
    yield "linear", linear

    def softmax(rng):
        x = leaf(rng, (3, 5))
        return (lambda: ad.softmax(x, axis=-1)), [x], {}
    yield "softmax", softmax

    def tsum(rng):
        x = leaf(rng, (2, 3, 4))
        return (lambda: ad.tsum(x, axis=1)), [x], {}
    yield "sum", tsum

    def mean(rng):
        x = leaf(rng, (2, 3, 4))
        return (lambda: ad.mean(x, axis=(0, 2), keepdims=True)), [x], {}
    yield "mean", mean

    def pool(rng):
        x = leaf(rng, (2, 3, 5, 4))
        valid = rng.random((2, 3, 5)) < 0.7
        valid[..., 0] = True
        return (lambda: ad.masked_max_pool(x, valid)), [x], {}
    yield "masked_max_pool", pool

    def reshape(rng):
        x = leaf(rng, (2, 4, 3))
        return (lambda: ad.reshape(x, (4, 6))), [x], {}
    yield "reshape", reshape

    def swap(rng):
        x = leaf(rng, (2, 4, 3))
        return (lambda: ad.swapaxes(x, -1, -2)), [x], {}
    yield "swapaxes", swap

    def concat(rng):
        a, b = leaf(rng, (2, 3, 2)), leaf(rng, (2, 3, 4))
        return (lambda: ad.concat([a, b], axis=-1)), [a, b], {}
    yield "concat", concat

    def gather2(rng):
        x = leaf(rng, (5, 3))
        idx = np.array([[0, 0, 2], [4, 1, 0]])
        return (lambda: ad.gather_rows(x, idx)), [x], {}
    yield "gather_rows", gather2

    def gather3(rng):
        x = leaf(rng, (2, 5, 3))
        idx = rng.integers(0, 5, size=(2, 4, 3))
        return (lambda: ad.gather_rows(x, idx)), [x], {}
    yield "gather_rows_batched", gather3

    for training in (True, False):
        def bn(rng, training=training):
            x, g, b = leaf(rng, (2, 4, 3)), leaf(rng, (3,)), leaf(rng, (3,))
            rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
            return (lambda: ad.batch_norm(x, g, b, rm.copy(), rv.copy(), training)), [x, g, b], {}
        yield f"batch_norm_{'train' if training else 'eval'}", bn

    def dropout(rng):
        x = leaf(rng, (4, 6))
        return (lambda: ad.dropout(x, 0.3, np.random.default_rng(3), True)), [x], {}
    yield "dropout", dropout

    def xent(rng):
        z = leaf(rng, (6, 4))
        y = rng.integers(0, 4, size=6)
        return (lambda: ad.cross_entropy(z, y, 0.2)), [z], {}
    yield "cross_entropy", xent

    # composites built from the layers the networks use
    def edge(rng):
        from .gpm import EdgeLinear
        m = EdgeLinear(4, 5, rng, dtype=DTYPE)
        centre, source = leaf(rng, (2, 3, 4)), leaf(rng, (2, 5, 4))
        idx = rng.integers(0, 5, size=(2, 3, 2))
        return (lambda: m(centre, source, idx)), [centre, source] + _module_leaves(m), {}
    yield "edge_linear", edge

    def attn(rng):
        from .gpm import attention
        q, k, v = leaf(rng, (2, 5, 4)), leaf(rng, (2, 5, 4)), leaf(rng, (2, 5, 4))
        return (lambda: attention(q, k, v, 0.5)[0]), [q, k, v], {}
    yield "attention", attn

    def hoconv(rng):
        from .lsf import HOConv, basis_mode
        m = HOConv(4, 3, basis_mode("s1_learnable", 1.3), rng, dtype=DTYPE)
        m.train()
        ci, nb = leaf(rng, (2, 3, 4)), leaf(rng, (2, 3, 5, 4))
        rel = Tensor(rng.uniform(-1, 1, size=(2, 3, 5, 10)))
        valid = np.ones((2, 3, 5), dtype=bool)
        return (lambda: m(ci, nb, rel, valid)), [ci, nb] + _module_leaves(m), {"max_entries": 30}
    yield "hoconv", hoconv

    def lsf(rng):
        from .lsf import LSFConfig, LSFConv, ScaleSpec
        cfg = LSFConfig(scales=[ScaleSpec(0.5, 4), ScaleSpec(0.9, 6)])
        m = LSFConv(3, 4, cfg, rng, dtype=DTYPE)
        m.train()
        pos = rng.uniform(-1, 1, size=(2, 12, 3))
        f = leaf(rng, (2, 12, 3))
        q = np.stack([np.arange(0, 12, 2)] * 2)
        return (lambda: m(pos, f, q)), [f] + _module_leaves(m), {"max_entries": 20}
    yield "lsfconv", lsf

    def gpm(rng):
        from .gpm import GlobalPerception, GPMConfig
        m = GlobalPerception(4, GPMConfig(k_feat=3, num_heads=2), rng, dtype=DTYPE)
        m.train()
        f = leaf(rng, (2, 6, 4))
        return (lambda: m(f)), [f] + _module_leaves(m), {"max_entries": 20}
    yield "global_perception", gpm


CASE_NAMES = [name for name, _ in _cases()]


def run_suite(names=None, seed=0, h=H, tol=TOL):
    """Run every case (or the named subset); returns a list of results."""
    results = []
    for i, (name, build) in enumerate(_cases()):
        if names and name not in names:
            continue
        rng = np.random.default_rng([seed, i])
        fn, leaves, kw = build(rng)
        results.append(check(name, fn, leaves, h=h, tol=tol, seed=seed + i, **kw))
    return results
