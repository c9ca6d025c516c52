"""Optimisation loop, metrics, test-time voting, checkpoints, few-shot runs."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data import AugmentPolicy, augment_batch, iterate_batches, load_arrays, sample_episode
from .errors import ArgumentError, ConfigError, TrainingDiverged
from .lsf import clamp_exponents

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "sgd"          # "sgd" (momentum) | "adam"
    lr_init: float = 0.01
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    label_smoothing: float = 0.2
    seed: int = 0
    vote_count: int = 1
    num_points: int | None = None
    val_split: str = "test"
    p_clamp: tuple = (0.1, 4.0)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)
        self.p_clamp = tuple(self.p_clamp)

    def validate(self):
        problems = []
        if self.lr_init < 0:
            problems.append("lr_init must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.vote_count < 1:
            problems.append("vote_count must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            problems.append(f"optimizer must be sgd|adam, got {self.optimizer!r}")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))
        return self


def cosine_lr(cfg, epoch):
    if cfg.epochs <= 1:
        return cfg.lr_init
    t = epoch / (cfg.epochs - 1)
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1 + math.cos(math.pi * t)) if cfg.lr_init > 0 else 0.0


# ----------------------------------------------------------------- optimisers

class SGD:
    def __init__(self, named_params, momentum=0.9, weight_decay=0.0):
        self.params = [(n, p) for n, p in named_params if p.trainable]
        self.momentum, self.weight_decay = momentum, weight_decay
        self.buf = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr):
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim >= 2:
                g = g + self.weight_decay * p.data
            v = self.buf[name]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)

    def state(self):
        return {f"{n}.momentum": v for n, v in self.buf.items()}

    def load_state(self, state):
        for n in self.buf:
            if f"{n}.momentum" in state:
                self.buf[n][...] = state[f"{n}.momentum"]


class Adam:
    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [(n, p) for n, p in named_params if p.trainable]
        self.b1, self.b2 = betas
        self.eps, self.weight_decay = eps, weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim >= 2:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self):
        out = {f"{n}.adam_m": a for n, a in self.m.items()}
        out.update({f"{n}.adam_v": a for n, a in self.v.items()})
        return out

    def load_state(self, state):
        for n in self.m:
            if f"{n}.adam_m" in state:
                self.m[n][...] = state[f"{n}.adam_m"]
                self.v[n][...] = state[f"{n}.adam_v"]


def make_optimizer(model, cfg):
    named = list(model.named_parameters())
    if cfg.optimizer == "sgd":
        return SGD(named, cfg.momentum, cfg.weight_decay)
    return Adam(named, weight_decay=cfg.weight_decay)


# -------------------------------------------------------------------- metrics

@dataclass
class Metrics:
    oa: float
    macc: float
    iou: list
    miou_class: float
    miou_instance: float
    loss: float

    def to_dict(self):
        return asdict(self)


def classification_metrics(logits, labels, num_classes, loss=float("nan")):
    pred = np.argmax(logits, axis=-1)
    labels = np.asarray(labels)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    present = support > 0
    acc = tp[present] / support[present]
    union = support + predicted - tp
    iou = np.where(union > 0, tp / np.maximum(union, 1), 0.0)
    return Metrics(
        oa=float(tp.sum() / max(labels.size, 1)),
        macc=float(acc.mean()) if acc.size else 0.0,
        iou=[float(v) for v in iou],
        miou_class=float(iou[present].mean()) if present.any() else 0.0,
        miou_instance=float(iou[labels].mean()) if labels.size else 0.0,
        loss=float(loss),
    )


def shape_iou(pred, labels, parts):
    """Mean IoU over ``parts`` for one shape; a part absent from both counts as 1."""
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (labels == p))
        union = np.sum((pred == p) | (labels == p))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def segmentation_metrics(logits, labels, categories, num_parts, part_sets=None, loss=float("nan")):
    """Point accuracy, per-part accuracy, per-category / per-instance mean IoU.

    ``logits [S, N, P]``, ``labels [S, N]``, ``categories [S]``. ``part_sets``
    maps a category to its part ids (default: every part).
    """
    pred = np.argmax(logits, axis=-1)
    labels = np.asarray(labels)
    categories = np.asarray(categories)
    shape_ious = np.array([
        shape_iou(pred[s], labels[s], (part_sets or {}).get(int(categories[s]), range(num_parts)))
        for s in range(labels.shape[0])
    ])
    cats = sorted(set(int(c) for c in categories))
    per_cat = [float(shape_ious[categories == c].mean()) for c in cats]
    part_acc = [np.mean(pred[labels == p] == p) for p in range(num_parts) if np.any(labels == p)]
    return Metrics(
        oa=float(np.mean(pred == labels)),
        macc=float(np.mean(part_acc)) if part_acc else 0.0,
        iou=per_cat,
        miou_class=float(np.mean(per_cat)),
        miou_instance=float(shape_ious.mean()),
        loss=float(loss),
    )


# ----------------------------------------------------------------- evaluation

def predict_logits(model, points, batch_size=32, categories=None):
    model.eval()
    outs = []
    with ad.no_grad():
        for idx in iterate_batches(len(points), batch_size):
            if model.cfg.task == "segment":
                cat = categories[idx] if categories is not None else None
                outs.append(model(points[idx], category=cat).data)
            else:
                outs.append(model(points[idx]).data)
    return np.concatenate(outs).astype(np.float64)


def vote_logits(model, points, vote_count=1, policy=None, seed=0, batch_size=32, categories=None,
                augment_fn=augment_batch):
    """Average logits over ``vote_count`` passes; the first pass is never augmented."""
    if vote_count < 1:
        raise ArgumentError("vote_count must be >= 1")
    policy = policy or AugmentPolicy()
    total = predict_logits(model, points, batch_size, categories)
    rng = np.random.default_rng([seed, 7919])
    for _ in range(vote_count - 1):
        aug = augment_fn(points, policy, rng).astype(points.dtype)
        total = total + predict_logits(model, aug, batch_size, categories)
    return total / vote_count


def evaluate_arrays(model, points, labels, vote_count=1, policy=None, seed=0, batch_size=32,
                    categories=None, part_sets=None, augment_fn=augment_batch):
    if len(points) == 0:
        raise ArgumentError("cannot evaluate an empty split")
    logits = vote_logits(model, points, vote_count, policy, seed, batch_size, categories, augment_fn)
    nc = model.cfg.num_classes
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    loss = -np.take_along_axis(logp, np.asarray(labels)[..., None], -1).mean()
    if model.cfg.task == "segment":
        return segmentation_metrics(logits, labels, categories, nc, part_sets, loss)
    return classification_metrics(logits, labels, nc, loss)


def load_split(manifest, split, model_cfg, num_points=None):
    idx = manifest.indices(split)
    if not idx:
        raise ArgumentError(f"split {split!r} is empty")
    pts, cls, parts = load_arrays(manifest, idx, num_points or model_cfg.num_points)
    if model_cfg.task == "segment":
        if parts is None:
            raise ConfigError("segmentation needs per-point labels in the manifest")
        return pts, parts, cls
    return pts, cls, None


def evaluate(model, manifest, split="test", vote_count=1, policy=None, seed=0, batch_size=32):
    points, labels, cats = load_split(manifest, split, model.cfg)
    return evaluate_arrays(model, points, labels, vote_count, policy, seed, batch_size, categories=cats)


# ------------------------------------------------------------------- training

METRIC_KEYS = ("epoch", "loss", "oa", "macc", "miou_class", "miou_instance", "lr", "wall_seconds")


@dataclass
class TrainResult:
    history: list
    best: dict | None = None
    last_checkpoint: str | None = None
    best_checkpoint: str | None = None


def fit(model, points, labels, cfg: TrainConfig, categories=None, on_epoch=None, on_row=None, dump_dir=None):
    """Train in place. ``on_epoch(epoch, train_loss, lr, seconds)`` may return a dict
    that is merged into that epoch's history row; ``on_row(row)`` sees the final row."""
    cfg.validate()
    opt = make_optimizer(model, cfg)
    if hasattr(model, "reseed_dropout"):
        model.reseed_dropout(cfg.seed)
    segment = model.cfg.task == "segment"
    history = []
    lo, hi = cfg.p_clamp
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(cfg, epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        model.train()
        losses, weights = [], []
        for b, idx in enumerate(iterate_batches(len(points), cfg.batch_size, rng)):
            if len(idx) < 2 and len(points) >= 2:
                continue  # batch statistics need more than one cloud
            x = points[idx]
            if not cfg.augment.is_identity():
                x = augment_batch(x, cfg.augment, rng).astype(points.dtype)
            y = labels[idx]
            with ad.Tape() as tape:
                logits = model(x, category=categories[idx]) if segment and categories is not None and \
                    model.cfg.num_categories else model(x)
                loss = ad.cross_entropy(logits, y, cfg.label_smoothing)
            value = float(loss.item())
            if not np.isfinite(value):
                dump = None
                if dump_dir is not None:
                    dump = Path(dump_dir) / f"nonfinite_epoch{epoch}_batch{b}.npz"
                    dump.parent.mkdir(parents=True, exist_ok=True)
                    np.savez(dump, points=x, labels=y, indices=idx)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b,
                                       str(dump) if dump else None)
            model.zero_grad()
            tape.backward(loss)
            opt.step(lr)
            clamp_exponents(model, lo, hi)
            losses.append(value)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        row = {"epoch": epoch, "loss": train_loss, "lr": lr}
        if on_epoch is not None:
            row.update(on_epoch(epoch, train_loss, lr, time.perf_counter() - t0) or {})
        row["wall_seconds"] = time.perf_counter() - t0
        history.append(row)
        if on_row is not None:
            on_row(row)
        log.info("epoch %d loss %.4f lr %.5f", epoch, train_loss, lr)
    return history, opt


def train(model, manifest, cfg: TrainConfig, out_dir=None):
    """Train on the manifest's ``train`` split, validating on ``cfg.val_split``
    each epoch. Writes ``metrics.jsonl``, ``last.{json,bin}`` and ``best.{json,bin}``."""
    cfg.validate()
    points, labels, cats = load_split(manifest, "train", model.cfg, cfg.num_points)
    val = None
    if manifest.indices(cfg.val_split):
        val = load_split(manifest, cfg.val_split, model.cfg, cfg.num_points)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    result = TrainResult(history=[])
    best_score = -np.inf

    def on_epoch(epoch, train_loss, lr, seconds):
        nonlocal best_score
        row = {}
        if val is not None:
            m = evaluate_arrays(model, val[0], val[1], 1, categories=val[2], batch_size=cfg.batch_size)
            row = {"oa": m.oa, "macc": m.macc, "miou_class": m.miou_class, "miou_instance": m.miou_instance,
                   "val_loss": m.loss}
            score = m.miou_instance if model.cfg.task == "segment" else m.oa
        else:
            score = -train_loss
        if out:
            save_checkpoint(out / "last", model, epoch=epoch)
            result.last_checkpoint = str(out / "last")
            if score > best_score:
                save_checkpoint(out / "best", model, epoch=epoch, extra={"score": score})
                result.best_checkpoint = str(out / "best")
        if score > best_score:
            best_score = score
            result.best = {"epoch": epoch, **row}
        return row

    def on_row(row):
        if out:
            full = {k: row.get(k) for k in METRIC_KEYS}
            with (out / "metrics.jsonl").open("a") as fh:
                fh.write(json.dumps(full) + "\n")

    history, opt = fit(model, points, labels, cfg, categories=cats, on_epoch=on_epoch, on_row=on_row,
                       dump_dir=out)
    result.history = history
    if out:
        save_checkpoint(out / "last", model, epoch=cfg.epochs - 1, optimizer_state=opt.state())
        result.last_checkpoint = str(out / "last")
    return result


# -------------------------------------------------------------------- few-shot

def fewshot_eval(model_builder, manifest, spec, cfg: TrainConfig, trials=10, num_points=None, split=None):
    """Mean and standard deviation of query accuracy over ``trials`` episodes.

    Trial ``t`` uses ``spec.trial_seed + t`` for episode sampling and model
    initialisation. ``model_builder(n_way, seed)`` returns a fresh model.
    """
    accs = []
    for t in range(trials):
        seed = spec.trial_seed + t
        ep = sample_episode(manifest, type(spec)(spec.n_way, spec.m_shot, spec.query_per_class, seed), split)
        model = model_builder(spec.n_way, seed)
        n = num_points or model.cfg.num_points
        xs, _, _ = load_arrays(manifest, ep.support, n)
        xq, _, _ = load_arrays(manifest, ep.query, n)
        ys = np.asarray(ep.support_labels)
        yq = np.asarray(ep.query_labels)
        run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed, "augment": cfg.augment})
        if spec.n_way > 1:
            fit(model, xs, ys, run_cfg)
        m = evaluate_arrays(model, xq, yq, cfg.vote_count, cfg.augment, seed)
        accs.append(m.oa)
        log.info("few-shot trial %d accuracy %.4f", t, m.oa)
    return {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "accuracies": accs,
            "n_way": spec.n_way, "m_shot": spec.m_shot, "trials": trials}
