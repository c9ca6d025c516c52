"""Synthetic shapes, point-file I/O, dataset manifests, augmentation, episodes."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, EpisodeError, ParseError, ShapeError
from .geometry import PointSet

PRIMITIVES = ("sphere", "cube", "torus", "cone", "plane")
MAGIC = b"PCB1"
MANIFEST_VERSION = 1

TORUS_MAJOR, TORUS_MINOR = 1.0, 0.35


# --------------------------------------------------------------------- shapes

def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, (v[:, 2] >= 0).astype(np.int64)


def _cube(n, rng):
    axis = rng.integers(0, 3, size=n)
    side = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1, 1, size=(n, 3))
    pts[np.arange(n), axis] = side
    return pts, axis


def _torus(n, rng):
    # rejection on the minor angle: surface density is proportional to R + r cos(v)
    out = np.empty((0, 2))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, TORUS_MAJOR + TORUS_MINOR, size=2 * n) < TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], 1)])
    u, v = out[:n, 0], out[:n, 1]
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], 1)
    return pts, (np.cos(v) >= 0).astype(np.int64)


def _cone(n, rng):
    radius, height = 1.0, 2.0
    slant = np.hypot(radius, height)
    lateral_area = np.pi * radius * slant
    base_area = np.pi * radius ** 2
    on_base = rng.uniform(size=n) < base_area / (lateral_area + base_area)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    # lateral surface: radius from the apex grows linearly, so area ~ t^2
    t = np.sqrt(rng.uniform(size=n))
    r_base = radius * np.sqrt(rng.uniform(size=n))
    r = np.where(on_base, r_base, radius * t)
    z = np.where(on_base, 0.0, height * (1 - t))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z - height / 4], 1)
    return pts, on_base.astype(np.int64)


def _plane(n, rng):
    xy = rng.uniform(-1, 1, size=(n, 2))
    pts = np.concatenate([xy, np.zeros((n, 1))], 1)
    return pts, (xy[:, 0] >= 0).astype(np.int64)


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "cone": _cone, "plane": _plane}
PART_COUNTS = {"sphere": 2, "cube": 3, "torus": 2, "cone": 2, "plane": 2}


def sample_primitive(name, n, rng):
    """Uniform surface samples ``[n, 3]`` and per-point part ids in the object frame."""
    if name not in _SAMPLERS:
        raise ConfigError(f"unknown primitive {name!r}; choose from {PRIMITIVES}")
    return _SAMPLERS[name](n, rng)


# ------------------------------------------------------------------ point I/O

def write_pointcloud(path, positions, labels=None, fmt="binary"):
    path = Path(path)
    pos = np.asarray(positions, dtype=np.float32)
    n = pos.shape[0]
    has = labels is not None
    if fmt == "binary":
        parts = [MAGIC, struct.pack("<IB", n, int(has)), pos.astype("<f4").tobytes()]
        if has:
            parts.append(np.asarray(labels, dtype="<u2").tobytes())
        path.write_bytes(b"".join(parts))
    elif fmt == "ascii":
        lines = [f"pts {n} {int(has)}"]
        for i in range(n):
            row = " ".join(repr(float(v)) for v in pos[i])
            lines.append(f"{row} {int(labels[i])}" if has else row)
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ConfigError(f"unknown point file format {fmt!r}")


def _read_binary(path, data):
    if len(data) < 9:
        raise ParseError(f"{path}: truncated header ({len(data)} bytes)")
    n, has = struct.unpack_from("<IB", data, 4)
    if has not in (0, 1):
        raise ParseError(f"{path}: has_label byte at offset 8 is {has}")
    need = 9 + 12 * n + (2 * n if has else 0)
    if len(data) != need:
        raise ParseError(f"{path}: expected {need} bytes for {n} points, found {len(data)} "
                         f"(offset {min(len(data), need)})")
    pos = np.frombuffer(data, dtype="<f4", count=3 * n, offset=9).reshape(n, 3).astype(np.float32)
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=9 + 12 * n).astype(np.int64) if has else None
    return pos, labels


def _read_ascii(path, text):
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: line 1: empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "pts" or head[2] not in ("0", "1"):
        raise ParseError(f"{path}: line 1: malformed header {lines[0]!r}")
    try:
        n = int(head[1])
    except ValueError:
        raise ParseError(f"{path}: line 1: bad point count {head[1]!r}") from None
    has = head[2] == "1"
    rows = [ln for ln in lines[1:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != n:
        raise ParseError(f"{path}: line {len(rows) + 2}: expected {n} rows, found {len(rows)}")
    width = 4 if has else 3
    pos = np.empty((n, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64) if has else None
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != width:
            raise ParseError(f"{path}: line {i + 2}: expected {width} fields, got {len(parts)}")
        try:
            pos[i] = [float(v) for v in parts[:3]]
            if has:
                labels[i] = int(parts[3])
        except ValueError:
            raise ParseError(f"{path}: line {i + 2}: cannot parse {ln!r}") from None
    return pos, labels


def load_pointcloud(path):
    """Read a binary (``PCB1``) or ASCII (``pts N has_label``) point file."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == MAGIC:
        pos, labels = _read_binary(path, data)
    else:
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError:
            raise ParseError(f"{path}: offset 0: neither PCB1 magic nor ASCII text") from None
        pos, labels = _read_ascii(path, text)
    if not np.all(np.isfinite(pos)):
        raise ParseError(f"{path}: non-finite coordinates")
    return PointSet(pos, labels=labels)


def read_point_count(path):
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(64)
    if head[:4] == MAGIC:
        if len(head) < 9:
            raise ParseError(f"{path}: truncated header")
        return struct.unpack_from("<I", head, 4)[0]
    first = head.split(b"\n", 1)[0].split()
    if len(first) != 3 or first[0] != b"pts":
        raise ParseError(f"{path}: line 1: malformed header")
    return int(first[1])


# ----------------------------------------------------------------- transforms

def normalize_unit_sphere(ps):
    """Centre on the centroid and scale the farthest point to norm 1."""
    pos = np.asarray(ps.positions, dtype=np.float64)
    pos = pos - pos.mean(axis=-2, keepdims=True)
    scale = np.linalg.norm(pos, axis=-1).max(axis=-1, keepdims=True)
    scale = np.where(scale > 0, scale, 1.0)
    pos = pos / scale[..., None]
    return PointSet(pos.astype(ps.positions.dtype), ps.features, ps.labels)


@dataclass
class AugmentPolicy:
    rotate: str | None = "z"         # None | "z" | "so3"
    jitter_sigma: float = 0.01
    scale_range: tuple = (0.8, 1.2)
    shift_range: float = 0.0

    def __post_init__(self):
        if self.rotate not in (None, "z", "so3"):
            raise ConfigError(f"rotate must be None, 'z' or 'so3', got {self.rotate!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        if self.jitter_sigma < 0 or self.shift_range < 0:
            raise ConfigError("jitter_sigma and shift_range must be non-negative")

    @classmethod
    def identity(cls):
        return cls(rotate=None, jitter_sigma=0.0, scale_range=(1.0, 1.0), shift_range=0.0)

    def is_identity(self):
        return (self.rotate is None and self.jitter_sigma == 0 and tuple(self.scale_range) == (1.0, 1.0)
                and self.shift_range == 0)


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(ps, policy, rng):
    """Rotate, scale, shift, then jitter one cloud. Labels are untouched."""
    pos = np.asarray(ps.positions, dtype=np.float64)
    if policy.rotate == "z":
        pos = pos @ _rot_z(rng.uniform(0, 2 * np.pi)).T
    elif policy.rotate == "so3":
        pos = pos @ Rotation.random(random_state=rng).as_matrix().T
    lo, hi = policy.scale_range
    if hi > lo:
        pos = pos * rng.uniform(lo, hi)
    elif lo != 1.0:
        pos = pos * lo
    if policy.shift_range > 0:
        pos = pos + rng.uniform(-policy.shift_range, policy.shift_range, size=3)
    if policy.jitter_sigma > 0:
        pos = pos + rng.normal(scale=policy.jitter_sigma, size=pos.shape)
    return PointSet(pos.astype(ps.positions.dtype), ps.features, ps.labels)


def augment_batch(points, policy, rng):
    return np.stack([augment(PointSet(p), policy, rng).positions for p in points])


# ------------------------------------------------------------------ manifests

@dataclass
class SampleRecord:
    path: str
    class_id: int
    num_points: int
    split: str = "train"
    label_file: str | None = None


@dataclass
class DatasetManifest:
    class_names: list
    samples: list
    version: int = MANIFEST_VERSION
    root: Path | None = field(default=None, compare=False)

    @property
    def num_classes(self):
        return len(self.class_names)

    def resolve(self, rel):
        return (self.root or Path(".")) / rel

    def indices(self, split=None):
        return [i for i, s in enumerate(self.samples) if split is None or s.split == split]

    def to_json(self):
        return {"version": self.version, "class_names": list(self.class_names),
                "samples": [asdict(s) for s in self.samples]}

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))
        self.root = path.parent

    @classmethod
    def load(cls, path, validate=True):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(f"cannot read manifest {path}: {e}") from e
        m = cls(doc["class_names"], [SampleRecord(**s) for s in doc["samples"]],
                doc.get("version", MANIFEST_VERSION), root=path.parent)
        if validate:
            m.validate()
        return m

    def validate(self, check_files=True):
        n = self.num_classes
        seen = sorted({s.class_id for s in self.samples})
        if any(c < 0 or c >= n for c in seen):
            raise ConfigError(f"class ids {seen} outside 0..{n - 1}")
        if check_files:
            for s in self.samples:
                f = self.resolve(s.path)
                if not f.exists():
                    raise ConfigError(f"missing point file {f}")
                count = read_point_count(f)
                if count != s.num_points:
                    raise ConfigError(f"{f}: {count} points but manifest says {s.num_points}")
                if s.label_file and not self.resolve(s.label_file).exists():
                    raise ConfigError(f"missing label file {self.resolve(s.label_file)}")
        return self


def generate_synthetic(out_dir, classes=PRIMITIVES, per_class=100, points_per_cloud=256, noise_sigma=0.0,
                       seed=0, train_fraction=0.8, fmt="binary", with_parts=False, rotate=True):
    """Write one file per cloud plus ``manifest.json`` under ``out_dir``.

    Each cloud is a uniformly sampled primitive surface, jittered by
    ``noise_sigma`` and given a random rigid rotation. The first
    ``train_fraction`` of each class is tagged ``train``, the rest ``test``.
    """
    classes = list(PRIMITIVES[:classes]) if isinstance(classes, int) else list(classes)
    for c in classes:
        if c not in _SAMPLERS:
            raise ConfigError(f"unknown primitive {c!r}; choose from {PRIMITIVES}")
    if points_per_cloud < 64:
        raise ConfigError("points_per_cloud must be at least 64")
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = int(round(per_class * train_fraction))
    ext = ".pcb" if fmt == "binary" else ".txt"
    samples = []
    for cid, name in enumerate(classes):
        for i in range(per_class):
            pts, parts = sample_primitive(name, points_per_cloud, rng)
            if noise_sigma > 0:
                pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
            if rotate:
                pts = pts @ Rotation.random(random_state=rng).as_matrix().T
            rel = f"clouds/{name}_{i:05d}{ext}"
            write_pointcloud(out / rel, pts, parts if with_parts else None, fmt=fmt)
            samples.append(SampleRecord(rel, cid, points_per_cloud, "train" if i < n_train else "test",
                                        rel if with_parts else None))
    manifest = DatasetManifest(classes, samples)
    manifest.save(out / "manifest.json")
    return manifest


def load_arrays(manifest, indices, num_points=None, normalize=True, seed=0):
    """Stack clouds into ``points [S, N, 3]``, ``class_ids [S]`` and part labels (or None).

    Clouds with more than ``num_points`` points are subsampled (seeded);
    fewer are padded by resampling with replacement.
    """
    rng = np.random.default_rng(seed)
    pts, cls, parts = [], [], []
    for i in indices:
        rec = manifest.samples[i]
        ps = load_pointcloud(manifest.resolve(rec.path))
        lab = load_pointcloud(manifest.resolve(rec.label_file)).labels if rec.label_file else None
        pos = ps.positions
        if num_points is not None and pos.shape[0] != num_points:
            n = pos.shape[0]
            sel = (rng.choice(n, num_points, replace=False) if n > num_points
                   else np.concatenate([np.arange(n), rng.choice(n, num_points - n)]))
            pos = pos[sel]
            lab = lab[sel] if lab is not None else None
        if normalize:
            pos = normalize_unit_sphere(PointSet(pos)).positions
        pts.append(pos)
        cls.append(rec.class_id)
        parts.append(lab)
    sizes = {p.shape[0] for p in pts}
    if len(sizes) > 1:
        raise ShapeError(f"clouds have different sizes {sorted(sizes)}; pass num_points")
    part_arr = np.stack(parts) if parts and all(p is not None for p in parts) else None
    return np.stack(pts).astype(np.float32), np.asarray(cls, dtype=np.int64), part_arr


def iterate_batches(n, batch_size, rng=None):
    """Index batches over ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ------------------------------------------------------------------- episodes

@dataclass
class EpisodeSpec:
    n_way: int
    m_shot: int
    query_per_class: int = 20
    trial_seed: int = 0


@dataclass
class Episode:
    classes: list           # original class ids, episode label = position in this list
    support: list           # sample indices
    support_labels: list
    query: list
    query_labels: list


def sample_episode(manifest, spec, split=None):
    """Draw ``n_way`` classes, then ``m_shot`` support and ``query_per_class``
    disjoint query samples per class, all from ``trial_seed``."""
    if spec.n_way < 1 or spec.m_shot < 1 or spec.query_per_class < 1:
        raise EpisodeError(f"invalid episode spec {spec}")
    if spec.n_way > manifest.num_classes:
        raise EpisodeError(f"{spec.n_way}-way episode but only {manifest.num_classes} classes")
    by_class = {c: [] for c in range(manifest.num_classes)}
    for i in manifest.indices(split):
        by_class[manifest.samples[i].class_id].append(i)
    rng = np.random.default_rng(spec.trial_seed)
    chosen = sorted(int(c) for c in rng.choice(manifest.num_classes, spec.n_way, replace=False))
    ep = Episode(chosen, [], [], [], [])
    need = spec.m_shot + spec.query_per_class
    for label, c in enumerate(chosen):
        pool = by_class[c]
        if len(pool) < need:
            raise EpisodeError(f"class {manifest.class_names[c]!r} has {len(pool)} samples, "
                               f"episode needs {need}")
        perm = rng.permutation(len(pool))
        picked = [pool[j] for j in perm[:need]]
        ep.support += picked[:spec.m_shot]
        ep.support_labels += [label] * spec.m_shot
        ep.query += picked[spec.m_shot:]
        ep.query_labels += [label] * spec.query_per_class
    return ep


def episode_seeds(trial_seed, trials=10):
    return [trial_seed + t for t in range(trials)]
