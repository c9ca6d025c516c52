"""Parameter containers and the small layer set the networks are built from."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A named leaf tensor owned by a module."""

    def __init__(self, data, trainable=True, name=""):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Module:
    """Walks its attributes for parameters, buffers and child modules.

    Buffers are plain numpy arrays listed in ``_buffer_names``; children may
    also be held in lists (``ModuleList`` semantics without the class).
    """

    training = True
    _buffer_names: tuple = ()

    def children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                value.name = prefix + key
                yield value.name, value
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def named_buffers(self, prefix=""):
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(prefix + key + ".")

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            arr = np.asarray(arr)
            if name in params:
                p = params[name]
                if p.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype).copy()
            elif name in buffers:
                buf = buffers[name]
                if buf.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {buf.shape}")
                buf[...] = arr

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for name, _ in self.named_buffers():
            owner, attr = self._resolve(name)
            setattr(owner, attr, getattr(owner, attr).astype(dtype))
        return self

    def _resolve(self, dotted):
        parts = dotted.split(".")
        obj = self
        i = 0
        while i < len(parts) - 1:
            nxt = getattr(obj, parts[i])
            if isinstance(nxt, (list, tuple)):
                nxt = nxt[int(parts[i + 1])]
                i += 1
            obj = nxt
            i += 1
        return obj, parts[-1]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True, dtype=np.float32):
        bound = 1.0 / np.sqrt(cin)
        self.w = Parameter(_uniform(rng, bound, (cin, cout), dtype))
        self.b = Parameter(_uniform(rng, bound, (cout,), dtype)) if bias else None
        self.cin, self.cout = cin, cout

    def forward(self, x):
        return ad.linear(x, self.w, self.b)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class MLP(Module):
    """Stack of Linear + BatchNorm layers, ReLU after every hidden layer.

    ``final_act=True`` also rectifies the last layer's output.
    """

    def __init__(self, widths, rng, final_act=False, norm=True, dtype=np.float32):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.linears = [Linear(a, b, rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [BatchNorm(b, dtype=dtype) for b in widths[1:]] if norm else []
        self.final_act = final_act
        self.widths = tuple(widths)

    def forward(self, x):
        last = len(self.linears) - 1
        for i, lin in enumerate(self.linears):
            x = lin(x)
            if self.norms:
                x = self.norms[i](x)
            if i < last or self.final_act:
                x = ad.relu(x)
        return x


class Dropout(Module):
    def __init__(self, rate, seed=0):
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        return ad.dropout(x, self.rate, self.rng, self.training)


def count_parameters(module):
    """Exact trainable-parameter count: ``{"total": n, "per_module": {child: n}}``."""
    per = OrderedDict()
    for name, p in module.named_parameters():
        if not p.trainable:
            continue
        parts = name.split(".")
        if parts[0] == "encoder" and parts[1] == "stages":
            top = ".".join(parts[:4])
        elif parts[0] in ("encoder", "decoder"):
            top = ".".join(parts[:2])
        else:
            top = parts[0]
        per[top] = per.get(top, 0) + int(p.data.size)
    return {"total": int(sum(per.values())), "per_module": dict(per)}
