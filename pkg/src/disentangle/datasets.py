"""Labeled image sets: MNIST IDX files, a procedural glyph dataset, splits
and the triplet sampler used for training.
"""
from __future__ import annotations

import dataclasses
import gzip
import io
import struct
from pathlib import Path

import numpy as np

from .serialization import (
    TruncatedError,
    dump_kv,
    parse_kv,
    read_exact,
    read_tensor,
    read_text_block,
    write_tensor,
    write_text_block,
)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclasses.dataclass
class LabeledImageSet:
    """Images in [0, 1] with shape (N, C, H, W) and integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_labels: int
    split: str = "train"
    nuisance: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("empty image set")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_labels:
            raise ValueError(f"labels must lie in [0, {self.num_labels})")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index, split: str | None = None) -> "LabeledImageSet":
        index = np.asarray(index)
        nuis = None if self.nuisance is None else self.nuisance[index]
        return LabeledImageSet(self.images[index], self.labels[index], self.num_labels,
                               split or self.split, nuis)


# ---------------------------------------------------------------- IDX

def _read_idx(path, expected: int, kind: str) -> tuple[tuple, bytes]:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected:
        raise IdxMagicError(f"{path}: magic {magic}, expected {expected} for {kind}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    return dims, raw[head:]


def load_idx(images_path, labels_path, num_labels: int = 10, split: str = "train") -> LabeledImageSet:
    """Parse an IDX image/label file pair (optionally gzipped) into [0, 1] images."""
    dims, payload = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    n, h, w = dims
    if len(payload) < n * h * w:
        raise IdxTruncatedError(f"{images_path}: {len(payload)} payload bytes, expected {n * h * w}")
    ldims, lpayload = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    (nl,) = ldims
    if len(lpayload) < nl:
        raise IdxTruncatedError(f"{labels_path}: {len(lpayload)} payload bytes, expected {nl}")
    if nl != n:
        raise IdxCountMismatchError(f"{n} images but {nl} labels")
    images = np.frombuffer(payload, dtype=np.uint8, count=n * h * w).reshape(n, 1, h, w)
    labels = np.frombuffer(lpayload, dtype=np.uint8, count=n).astype(np.int64)
    return LabeledImageSet(images / 255.0, labels, num_labels, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images (N, H, W) and labels (N,) as raw IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------- synthetic glyphs

@dataclasses.dataclass
class SyntheticFactorSpec:
    """Identity = a seeded stroke glyph; nuisance = pose and brightness.

    Translation is in pixels, rotation in degrees, scale and brightness are
    multiplicative bands.
    """

    num_identities: int = 10
    samples_per_identity: int = 200
    image_side: int = 32
    glyph_seed: int = 0
    strokes: int = 3
    points_per_stroke: int = 3
    stroke_width: float = 2.0
    max_shift: float = 3.0
    max_rotation: float = 25.0
    scale_min: float = 0.8
    scale_max: float = 1.15
    brightness_min: float = 0.6
    brightness_max: float = 1.0

    def __post_init__(self):
        if self.num_identities < 1 or self.samples_per_identity < 1 or self.image_side < 4:
            raise ValueError("need at least one identity, one sample and a side of 4 pixels")
        if self.max_shift < 0 or self.max_rotation < 0:
            raise ValueError("shift and rotation ranges must be non-negative")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("scale band must satisfy 0 < scale_min <= scale_max")
        if not 0 < self.brightness_min <= self.brightness_max <= 1:
            raise ValueError("brightness band must satisfy 0 < min <= max <= 1")

    def to_kv(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_kv(cls, kv: dict) -> "SyntheticFactorSpec":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for k, v in kv.items():
            if k not in fields:
                raise KeyError(f"unknown synthetic spec key {k!r}")
            out[k] = int(v) if fields[k] in ("int", int) else float(v)
        return cls(**out)


def glyph_strokes(spec: SyntheticFactorSpec, identity: int) -> np.ndarray:
    """Stroke polylines for one identity, shape (strokes, points, 2), centred in [-1, 1]."""
    rng = np.random.default_rng([spec.glyph_seed, identity])
    pts = rng.uniform(-1.0, 1.0, size=(spec.strokes, spec.points_per_stroke, 2))
    pts -= pts.reshape(-1, 2).mean(axis=0)
    return pts / max(np.abs(pts).max(), 1e-9)


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((px - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(px - closest, axis=1)


def render_glyph(strokes: np.ndarray, side: int, shift=(0.0, 0.0), rotation: float = 0.0,
                 scale: float = 1.0, brightness: float = 1.0, width: float = 2.0) -> np.ndarray:
    """Anti-aliased rendering of a stroke glyph under a similarity transform."""
    radius = 0.3 * side * scale
    c = (side - 1) / 2.0
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    px = np.stack([xs.ravel() - c - shift[0], ys.ravel() - c - shift[1]], axis=1)
    th = np.deg2rad(rotation)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    pts = strokes @ rot.T * radius
    dist = np.full(px.shape[0], np.inf)
    for stroke in pts:
        for a, b in zip(stroke[:-1], stroke[1:]):
            dist = np.minimum(dist, _segment_distance(px, a, b))
    ink = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    return (brightness * ink).reshape(side, side)


def generate_synthetic(spec: SyntheticFactorSpec, seed: int = 0) -> LabeledImageSet:
    """Render every identity under independently sampled nuisance transforms.

    The sampled factors (dx, dy, rotation, scale, brightness) are kept in
    ``nuisance`` for diagnostics only.
    """
    rng = np.random.default_rng(seed)
    n = spec.num_identities * spec.samples_per_identity
    side = spec.image_side
    images = np.empty((n, 1, side, side))
    labels = np.repeat(np.arange(spec.num_identities), spec.samples_per_identity)
    nuisance = np.column_stack([
        rng.uniform(-spec.max_shift, spec.max_shift, n),
        rng.uniform(-spec.max_shift, spec.max_shift, n),
        rng.uniform(-spec.max_rotation, spec.max_rotation, n),
        rng.uniform(spec.scale_min, spec.scale_max, n),
        rng.uniform(spec.brightness_min, spec.brightness_max, n),
    ])
    glyphs = [glyph_strokes(spec, i) for i in range(spec.num_identities)]
    for k in range(n):
        dx, dy, rot, sc, br = nuisance[k]
        images[k, 0] = render_glyph(glyphs[labels[k]], side, (dx, dy), rot, sc, br, spec.stroke_width)
    return LabeledImageSet(images, labels, spec.num_identities, "train", nuisance)


DSYN_MAGIC = b"DSYN"
DSYN_VERSION = 1


def save_synthetic(path, data: LabeledImageSet, spec: SyntheticFactorSpec, seed: int):
    with open(path, "wb") as f:
        f.write(DSYN_MAGIC)
        f.write(struct.pack("<I", DSYN_VERSION))
        write_text_block(f, dump_kv({**spec.to_kv(), "seed": seed}))
        tensors = [("images", data.images), ("labels", data.labels.astype(np.float64))]
        if data.nuisance is not None:
            tensors.append(("nuisance", data.nuisance))
        f.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors:
            write_tensor(f, name, arr)


def load_synthetic(path) -> tuple[LabeledImageSet, SyntheticFactorSpec, int]:
    with open(path, "rb") as f:
        if f.read(4) != DSYN_MAGIC:
            raise ValueError(f"{path}: not a DSYN dataset container")
        try:
            (version,) = struct.unpack("<I", read_exact(f, 4))
            if version != DSYN_VERSION:
                raise ValueError(f"{path}: unsupported DSYN version {version}")
            kv = parse_kv(read_text_block(f))
            seed = int(kv.pop("seed"))
            spec = SyntheticFactorSpec.from_kv(kv)
            (count,) = struct.unpack("<Q", read_exact(f, 8))
            tensors = dict(read_tensor(f) for _ in range(count))
        except TruncatedError as exc:
            raise ValueError(f"{path}: truncated DSYN container ({exc})") from None
    data = LabeledImageSet(tensors["images"], tensors["labels"].astype(np.int64), spec.num_identities,
                           "train", tensors.get("nuisance"))
    return data, spec, seed


def load_or_generate_synthetic(spec: SyntheticFactorSpec, seed: int, cache: str | Path | None = None) -> LabeledImageSet:
    if cache is not None and Path(cache).exists():
        data, cached_spec, cached_seed = load_synthetic(cache)
        if cached_spec == spec and cached_seed == seed:
            return data
    data = generate_synthetic(spec, seed)
    if cache is not None:
        save_synthetic(cache, data, spec, seed)
    return data


# ---------------------------------------------------------------- splits

def split_by_sample(data: LabeledImageSet, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, LabeledImageSet]:
    """Stratified train/val/test split; every label keeps its share in each part."""
    if not np.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for label in np.unique(data.labels):
        idx = rng.permutation(np.flatnonzero(data.labels == label))
        n_val = int(round(fractions[1] * len(idx)))
        n_test = int(round(fractions[2] * len(idx)))
        parts["val"].append(idx[:n_val])
        parts["test"].append(idx[n_val : n_val + n_test])
        parts["train"].append(idx[n_val + n_test :])
    return {name: data.subset(np.sort(np.concatenate(ix)), name) for name, ix in parts.items()}


def split_by_identity(data: LabeledImageSet, held_out, seed: int = 0,
                      val_fraction: float = 0.1) -> dict[str, LabeledImageSet]:
    """Hold whole identities out of training.

    ``train``/``val`` share the remaining identities (disjoint samples);
    ``test`` holds every sample of the held-out identities.
    """
    held_out = np.asarray(sorted(set(int(h) for h in held_out)))
    test_mask = np.isin(data.labels, held_out)
    if test_mask.all() or not test_mask.any():
        raise ValueError("held-out identities must be a non-empty proper subset")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for label in np.unique(data.labels[~test_mask]):
        idx = rng.permutation(np.flatnonzero(data.labels == label))
        n_val = int(round(val_fraction * len(idx)))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return {
        "train": data.subset(np.sort(np.concatenate(train_idx)), "train"),
        "val": data.subset(np.sort(np.concatenate(val_idx)), "val"),
        "test": data.subset(np.flatnonzero(test_mask), "test"),
    }


# ---------------------------------------------------------------- sampling

@dataclasses.dataclass
class TripletBatch:
    """``x1``/``x1p`` share label ``id1``; ``x2`` carries ``id2``."""

    x1: np.ndarray
    x1p: np.ndarray
    x2: np.ndarray
    id1: np.ndarray
    id1p: np.ndarray
    id2: np.ndarray

    def __len__(self):
        return len(self.id1)


class TripletSampler:
    """Draws triplets with the x1 class chosen uniformly among classes that
    have at least two samples.

    ``distinct_labels`` forces ``id2 != id1``; otherwise ``x2`` is any sample.
    """

    def __init__(self, data: LabeledImageSet, rng: np.random.Generator, distinct_labels: bool = True):
        self.data = data
        self.rng = rng
        self.distinct_labels = distinct_labels
        classes, counts = np.unique(data.labels, return_counts=True)
        self.by_class = {int(c): np.flatnonzero(data.labels == c) for c in classes}
        self.anchor_classes = classes[counts >= 2]
        if len(self.anchor_classes) == 0:
            raise ValueError("no label has at least two samples; cannot form triplets")
        self.classes = classes
        if distinct_labels and len(classes) < 2:
            raise ValueError("distinct labels requested but the set has a single label")

    def sample_indices(self, batch: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = self.rng
        c1 = self.anchor_classes[rng.integers(0, len(self.anchor_classes), size=batch)]
        i1 = np.empty(batch, dtype=np.int64)
        i1p = np.empty(batch, dtype=np.int64)
        i2 = np.empty(batch, dtype=np.int64)
        for b in range(batch):
            members = self.by_class[int(c1[b])]
            a, p = rng.choice(len(members), size=2, replace=False)
            i1[b], i1p[b] = members[a], members[p]
            if self.distinct_labels:
                others = self.classes[self.classes != c1[b]]
                c2 = others[rng.integers(0, len(others))]
                m2 = self.by_class[int(c2)]
                i2[b] = m2[rng.integers(0, len(m2))]
            else:
                i2[b] = rng.integers(0, len(self.data))
        return i1, i1p, i2

    def sample(self, batch: int) -> TripletBatch:
        i1, i1p, i2 = self.sample_indices(batch)
        d = self.data
        return TripletBatch(d.images[i1], d.images[i1p], d.images[i2], d.labels[i1], d.labels[i1p], d.labels[i2])


def sample_triplet(data: LabeledImageSet, rng: np.random.Generator, distinct_labels: bool = True):
    """One triplet ``(x1, x1p, x2, id1, id2)``."""
    t = TripletSampler(data, rng, distinct_labels).sample(1)
    return t.x1[0], t.x1p[0], t.x2[0], int(t.id1[0]), int(t.id2[0])
