"""GPS blocks and the classification / part-segmentation networks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .geometry import canonical_order, farthest_point_sample, gather_points, knn, sq_dist3
from .gpm import GlobalPerception, GPMConfig
from .lsf import LSFConfig, LSFConv
from .nn import Dropout, Linear, MLP, Module, count_parameters

VARIANT_DIMS = {
    "classify": {"full": [64, 128, 256], "elite": [32, 64, 128]},
    "segment": {"full": [64, 128, 256, 384, 512], "elite": [32, 64, 128, 192, 256]},
}


@dataclass
class GPSFormerConfig:
    variant: str = "full"
    task: str = "classify"
    num_classes: int = 15
    num_points: int = 1024
    stage_dims: list | None = None
    stage_point_counts: list | None = None
    seg_stage_count: int = 5
    head_dims: list = field(default_factory=lambda: [512, 256])
    dropout: float = 0.5
    num_categories: int = 0   # >0 enables one-hot category conditioning in the decoder
    dtype: str = "float32"
    seed: int = 0
    gpm: GPMConfig = field(default_factory=GPMConfig)
    lsf: LSFConfig = field(default_factory=LSFConfig)

    def __post_init__(self):
        if isinstance(self.gpm, dict):
            self.gpm = GPMConfig(**self.gpm)
        if isinstance(self.lsf, dict):
            self.lsf = LSFConfig(**self.lsf)
        n_stages = 3 if self.task == "classify" else self.seg_stage_count
        if self.stage_dims is None and self.task in VARIANT_DIMS and self.variant in VARIANT_DIMS[self.task]:
            self.stage_dims = list(VARIANT_DIMS[self.task][self.variant][:n_stages])
        if self.stage_point_counts is None:
            self.stage_point_counts = [self.num_points // 2 ** (i + 1) for i in range(n_stages)]

    @property
    def scales(self):
        return self.lsf.scales

    def validate(self):
        problems = []
        if self.task not in ("classify", "segment"):
            problems.append(f"task must be classify|segment, got {self.task!r}")
        if self.variant not in ("full", "elite"):
            problems.append(f"variant must be full|elite, got {self.variant!r}")
        dims, counts = self.stage_dims or [], self.stage_point_counts or []
        if len(dims) != len(counts) or not dims:
            problems.append(f"stage_dims {dims} and stage_point_counts {counts} must be non-empty and equal length")
        if any(b <= a for a, b in zip(dims, dims[1:])):
            problems.append(f"stage_dims must be strictly increasing: {dims}")
        if any(b >= a for a, b in zip(counts, counts[1:])):
            problems.append(f"stage_point_counts must be strictly decreasing: {counts}")
        if counts and counts[0] > self.num_points:
            problems.append(f"first stage keeps {counts[0]} points but input has {self.num_points}")
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if dims and dims[0] % 2:
            problems.append("stage_dims[0] must be even (embedding width is half of it)")
        widths = [dims[0] // 2] + list(dims[:-1]) if dims else []
        if any(w % self.gpm.num_heads for w in widths):
            problems.append(f"every stage input width {widths} must divide by {self.gpm.num_heads} heads")
        gpm_points = [self.num_points] + list(counts[:-1])
        if self.gpm.use_adgconv and any(m < self.gpm.k_feat for m in gpm_points):
            problems.append(f"k_feat={self.gpm.k_feat} exceeds a stage input size {gpm_points}")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32|float64, got {self.dtype!r}")
        for sub in (self.gpm, self.lsf):
            try:
                sub.validate()
            except ConfigError as e:
                problems.append(str(e))
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    def to_dict(self):
        d = asdict(self)
        d["lsf"]["p_clamp"] = list(self.lsf.p_clamp)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class GPSBlock(Module):
    """Global perception on all input points, FPS, then local fitting."""

    def __init__(self, cin, cout, n_out, cfg: GPSFormerConfig, rng, dtype):
        self.gpm = GlobalPerception(cin, cfg.gpm, rng, dtype=dtype)
        self.lsf = LSFConv(cin, cout, cfg.lsf, rng, dtype=dtype)
        self.n_out = n_out

    def forward(self, pos, feats):
        feats = self.gpm(feats)
        query = farthest_point_sample(pos, self.n_out)
        out = self.lsf(pos, feats, query)
        return gather_points(pos, query), out


def _canonical(points):
    points = np.asarray(points)
    if points.ndim != 3 or points.shape[-1] != 3:
        raise ShapeError(f"expected points [B, N, 3], got {points.shape}")
    order = canonical_order(points)
    return order, gather_points(points, order)


class Encoder(Module):
    def __init__(self, cfg: GPSFormerConfig, rng, dtype):
        dims = cfg.stage_dims
        self.embed = MLP([3, dims[0] // 2], rng, final_act=True, dtype=dtype)
        widths = [dims[0] // 2] + list(dims)
        self.stages = [GPSBlock(widths[i], widths[i + 1], cfg.stage_point_counts[i], cfg, rng, dtype)
                       for i in range(len(dims))]

    def forward(self, pos):
        """Returns ``[(pos, feats)]`` for the embedded input and every stage."""
        feats = self.embed(Tensor(pos))
        levels = [(pos, feats)]
        for stage in self.stages:
            pos, feats = stage(pos, feats)
            levels.append((pos, feats))
        return levels


class GPSFormerClassifier(Module):
    def __init__(self, cfg: GPSFormerConfig):
        cfg.validate()
        if cfg.task != "classify":
            raise ConfigError("build_classifier needs task == 'classify'")
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng, dtype)
        widths = [cfg.stage_dims[-1]] + list(cfg.head_dims)
        self.head_hidden = [MLP([a, b], rng, final_act=True, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.head_drop = [Dropout(cfg.dropout, seed=cfg.seed + 1 + i) for i in range(len(self.head_hidden))]
        self.head_out = Linear(widths[-1], cfg.num_classes, rng, dtype=dtype)

    def features(self, points):
        """Global max-pooled descriptor ``[B, C]`` fed to the head."""
        _, pos = _canonical(points)
        pos = pos.astype(self.cfg.dtype)
        _, feats = self.encoder(pos)[-1]
        return ad.masked_max_pool(feats)

    def forward(self, points):
        x = self.features(points)
        for mlp, drop in zip(self.head_hidden, self.head_drop):
            x = drop(mlp(x))
        return self.head_out(x)

    def reseed_dropout(self, seed):
        for i, d in enumerate(self.head_drop):
            d.rng = np.random.default_rng([seed, i])


def feature_propagate(fine_pos, coarse_pos, coarse_feats):
    """Inverse-distance interpolation from the 3 nearest coarse points.

    A fine point within 1e-8 of a coarse point copies that point's feature.
    Works on single clouds (``[N,3]``, ``[M,C]``) or batches.
    """
    fine_pos = np.asarray(fine_pos)
    coarse_pos = np.asarray(coarse_pos)
    coarse_feats = ad.as_tensor(coarse_feats)
    k = min(3, coarse_pos.shape[-2])
    idx = knn(fine_pos, coarse_pos, k).indices
    near = gather_points(coarse_pos, idx)
    off = near.astype(np.float64) - fine_pos[..., None, :].astype(np.float64)
    d = np.sqrt((off * off).sum(-1))
    inv = 1.0 / np.maximum(d, 1e-8)
    w = inv / inv.sum(-1, keepdims=True)
    hit = d < 1e-8
    if hit.any():
        first = hit & (np.cumsum(hit, axis=-1) == 1)
        rows = hit.any(-1)
        w[rows] = first[rows].astype(np.float64)
    w = w.astype(coarse_feats.dtype)
    gathered = ad.gather_rows(coarse_feats, idx)
    return ad.tsum(ad.mul(gathered, w[..., None]), axis=-2)


class FeaturePropagation(Module):
    def __init__(self, c_coarse, c_skip, cout, rng, dtype):
        self.mlp = MLP([c_coarse + c_skip, cout, cout], rng, final_act=True, dtype=dtype)

    def forward(self, fine_pos, fine_feats, coarse_pos, coarse_feats):
        up = feature_propagate(fine_pos, coarse_pos, coarse_feats)
        return self.mlp(ad.concat([up, fine_feats], axis=-1))


class GPSFormerSegmenter(Module):
    def __init__(self, cfg: GPSFormerConfig):
        cfg.validate()
        if cfg.task != "segment":
            raise ConfigError("build_segmenter needs task == 'segment'")
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng, dtype)
        widths = [cfg.stage_dims[0] // 2] + list(cfg.stage_dims)
        decoder = []
        c_coarse = widths[-1]
        for level in range(len(widths) - 2, -1, -1):
            c_skip = widths[level]
            if level == 0:
                c_skip += cfg.num_categories
            cout = max(widths[level], widths[1]) if level == 0 else widths[level]
            decoder.append(FeaturePropagation(c_coarse, c_skip, cout, rng, dtype))
            c_coarse = cout
        self.decoder = decoder
        self.head = MLP([c_coarse, c_coarse], rng, final_act=True, dtype=dtype)
        self.head_drop = Dropout(cfg.dropout, seed=cfg.seed + 1)
        self.head_out = Linear(c_coarse, cfg.num_classes, rng, dtype=dtype)

    def forward(self, points, category=None):
        order, pos = _canonical(points)
        pos = pos.astype(self.cfg.dtype)
        levels = self.encoder(pos)
        coarse_pos, coarse = levels[-1]
        for step, fp in enumerate(self.decoder):
            fine_pos, fine = levels[-2 - step]
            if fine_pos is levels[0][0] and self.cfg.num_categories:
                fine = ad.concat([fine, Tensor(_one_hot(category, self.cfg.num_categories, fine.shape[1], fine.dtype))],
                                 axis=-1)
            coarse = fp(fine_pos, fine, coarse_pos, coarse)
            coarse_pos = fine_pos
        logits = self.head_out(self.head_drop(self.head(coarse)))
        inverse = np.argsort(order, axis=1)
        return ad.gather_rows(logits, inverse)

    def reseed_dropout(self, seed):
        self.head_drop.rng = np.random.default_rng([seed, 0])


def _one_hot(category, n, points, dtype):
    if category is None:
        raise ConfigError("category conditioning is enabled but no category was passed")
    category = np.asarray(category).reshape(-1)
    out = np.zeros((category.size, points, n), dtype=dtype)
    out[np.arange(category.size), :, category] = 1
    return out


def build_classifier(cfg: GPSFormerConfig):
    return GPSFormerClassifier(cfg)


def build_segmenter(cfg: GPSFormerConfig):
    return GPSFormerSegmenter(cfg)


def build_model(cfg: GPSFormerConfig):
    return build_classifier(cfg) if cfg.task == "classify" else build_segmenter(cfg)


def estimate_flops(model, n_points=None, seed=0):
    """Multiply-accumulates of one eval-mode forward on a random cloud of ``n_points``."""
    n_points = n_points or model.cfg.num_points
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(1, n_points, 3))
    pts /= np.linalg.norm(pts, axis=-1, keepdims=True).max()
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad(), ad.count_flops() as counter:
            model(pts, category=np.zeros(1, dtype=int)) if isinstance(model, GPSFormerSegmenter) else model(pts)
    finally:
        model.train(was_training)
    return counter


def complexity_report(model, n_points=None):
    params = count_parameters(model)
    flops = estimate_flops(model, n_points)
    return {"params": params["total"], "flops": flops.macs, "per_module": params["per_module"],
            "flops_by_op": flops.by_op}


__all__ = [
    "GPSFormerConfig", "GPSFormerClassifier", "GPSFormerSegmenter", "build_classifier", "build_segmenter",
    "build_model", "feature_propagate", "estimate_flops", "complexity_report", "count_parameters", "sq_dist3",
]
