"""Dataset loading, synthesis, splitting, batching and image export.

Images are float64 arrays shaped (H, W, C) with intensities in [0, 1];
datasets keep a stable example order so reloads hash identically.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .rng import derive_seed, rng_for

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes


class DataFormatError(ValueError):
    """Malformed dataset file; loaders raise this instead of crashing."""


@dataclass(frozen=True)
class DatasetSplit:
    """An ordered, immutable set of labelled images.

    images: (N, H, W, C) float64 in [0, 1]; labels: (N,) int64.
    """

    name: str
    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels length mismatch")
        if len(self.labels) and int(self.labels.max()) >= self.classes:
            raise ValueError("label exceeds class count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def example(self, i: int):
        return self.images[i], int(self.labels[i])

    def content_hash(self) -> str:
        """Hash of pixel and label content; identical across reloads."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(str(self.classes).encode())
        h.update(str(self.images.shape).encode())
        return h.hexdigest()


def _open_maybe_gz(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def load_idx(images_path, labels_path, name: str = "idx") -> DatasetSplit:
    """Read an IDX image/label file pair (big-endian header format)."""
    with _open_maybe_gz(images_path) as f:
        head = f.read(4)
        if len(head) < 4:
            raise DataFormatError(f"{images_path}: truncated IDX header")
        (magic,) = struct.unpack(">I", head)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad IDX image magic 0x{magic:08x}, "
                f"expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        dims = struct.unpack(">III", f.read(12))
        n, h, w = dims
        raw = f.read(n * h * w)
        if len(raw) != n * h * w:
            raise DataFormatError(f"{images_path}: truncated IDX payload ({len(raw)} of {n * h * w} bytes)")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 1) / 255.0
    with _open_maybe_gz(labels_path) as f:
        head = f.read(4)
        if len(head) < 4:
            raise DataFormatError(f"{labels_path}: truncated IDX header")
        (magic,) = struct.unpack(">I", head)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad IDX label magic 0x{magic:08x}, "
                f"expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        (nl,) = struct.unpack(">I", f.read(4))
        raw = f.read(nl)
        if len(raw) != nl:
            raise DataFormatError(f"{labels_path}: truncated IDX payload")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != nl:
        raise DataFormatError(f"IDX count mismatch: {n} images vs {nl} labels")
    classes = int(labels.max()) + 1 if len(labels) else 0
    return DatasetSplit(name, images, labels, classes)


def load_cifar10_binary(paths, name: str = "cifar10") -> DatasetSplit:
    """Read CIFAR-10 binary batch files (3073-byte records, RGB planes)."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % CIFAR_RECORD != 0:
            raise DataFormatError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD} "
                f"(stray {len(raw) % CIFAR_RECORD} bytes at offset "
                f"{len(raw) - len(raw) % CIFAR_RECORD})"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        planes = rec[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planes.transpose(0, 2, 3, 1) / 255.0)
    return DatasetSplit(name, np.concatenate(images), np.concatenate(labels), 10)


# ---------------------------------------------------------------------------
# Synthetic blobs
#
# Each class owns a fixed template: two Gaussian bumps (a main and a fainter
# echo) with a class color and an optional fine stripe texture. Classes come
# in pairs built around one dominant, perturbation-fragile cue -- a
# luminance-matched color difference (erased by grayscaling), a stripe
# orientation (erased by blurring), or a position offset (scrambled by
# geometric warps) -- plus a subtler shape or size cue that survives that
# perturbation. A classifier fit on clean data leans on the dominant cue and
# drops when it is removed, while training on perturbed copies can shift to
# the surviving cue, so the drop is recoverable rather than information-
# theoretic. Examples are the template plus i.i.d. pixel noise, so noise 0
# makes a class's images identical and the set is linearly separable at low
# noise.
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])

# five pair blocks: style, main anchor, echo anchor, base color
_BLOCKS = [
    ("color",     (0.27, 0.27), (0.71, 0.69), (0.85, 0.25, 0.25)),
    ("texture",   (0.27, 0.73), (0.69, 0.27), (0.80, 0.65, 0.20)),
    ("pos_x",     (0.50, 0.50), (0.86, 0.50), (0.30, 0.55, 0.90)),
    ("color",     (0.16, 0.50), (0.55, 0.86), (0.70, 0.30, 0.85)),
    ("pos_y",     (0.78, 0.20), (0.48, 0.82), (0.20, 0.75, 0.60)),
]


def _luminance_matched(color):
    """A hue-rotated color with the same gray value as ``color``."""
    base = np.asarray(color)
    rotated = base[[2, 0, 1]]
    scale = float(base @ _LUMA) / float(rotated @ _LUMA)
    return np.clip(rotated * scale, 0.0, 1.0)


def _class_style(k: int) -> dict:
    block, parity = divmod(k, 2)
    kind, main, echo, color = _BLOCKS[block % len(_BLOCKS)]
    # blocks beyond the base five reuse anchor slots slightly shifted
    shift = 0.04 * (block // len(_BLOCKS))
    main = (main[0] + shift, main[1])
    echo = (echo[0] + shift, echo[1])
    style = {
        "main": main, "echo": echo, "color": np.asarray(color),
        "texture": "plain", "sx": 1.0, "sy": 1.0, "size": 1.0,
    }
    if kind == "color":
        if parity == 1:
            # equal luminance and equal bump mass: gray images differ only
            # by the elongation
            style["color"] = _luminance_matched(style["color"])
            style["sx"], style["sy"] = 1.35, 1.0 / 1.35
    elif kind == "texture":
        style["texture"] = "vstripe" if parity == 0 else "hstripe"
        style["size"] = 0.8 if parity == 0 else 1.3
    elif kind == "pos_x":
        dy, dx = (-0.055, -0.095) if parity == 0 else (0.055, 0.095)
        style["main"] = (main[0] + dy, main[1] + dx)
        style["echo"] = (echo[0], echo[1] + dx)
        if parity == 1:
            style["sx"], style["sy"] = 1.0 / 1.35, 1.35
    else:  # pos_y
        dy, dx = (-0.085, -0.05) if parity == 0 else (0.085, 0.05)
        style["main"] = (main[0] + dy, main[1] + dx)
        style["echo"] = (echo[0] + dy, echo[1])
        if parity == 1:
            style["sx"], style["sy"] = 1.35, 1.0 / 1.35
    return style


def _class_templates(classes: int, size: int, amplitude: float = 0.65) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = 0.09 * size
    period = max(3.0, size / 7.5)
    out = np.full((classes, size, size, 3), 0.10)
    for k in range(classes):
        st = _class_style(k)
        if st["texture"] == "vstripe":
            mod = 0.5 * (1.0 + np.sin(2 * np.pi * xx / period))
        elif st["texture"] == "hstripe":
            mod = 0.5 * (1.0 + np.sin(2 * np.pi * yy / period))
        else:
            mod = np.ones_like(xx)
        s = sigma * st["size"]
        bumps = (
            (st["main"], 1.0, s * st["sy"], s * st["sx"], mod),
            (st["echo"], 0.8, s * 0.9, s * 0.9, np.ones_like(xx)),
        )
        for (py, px), weight, sy, sx, m in bumps:
            d2 = ((yy - py * (size - 1)) ** 2 / (2 * sy**2)
                  + (xx - px * (size - 1)) ** 2 / (2 * sx**2))
            bump = np.exp(-d2) * m * amplitude * weight
            out[k] += bump[..., None] * st["color"]
    return np.clip(out, 0.0, 0.97)


def synth_blobs(classes: int, per_class: int, size: int, seed: int,
                noise: float = 0.08, name: str = "blobs") -> DatasetSplit:
    """Generate a deterministic blob dataset; see the module notes above."""
    if size < 8:
        raise ValueError(f"image size must be >= 8, got {size}")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    templates = _class_templates(classes, size)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    rng = rng_for(seed, "blobs", classes, per_class, size)
    images = templates[labels]
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape)
    return DatasetSplit(name, np.clip(images, 0.0, 1.0), labels, classes)


# ---------------------------------------------------------------------------
# Splitting and batching
# ---------------------------------------------------------------------------

def stratified_split(split: DatasetSplit, fractions, seed: int, names=None):
    """Partition a split class-by-class into len(fractions) disjoint splits."""
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    names = names or [f"{split.name}-part{i}" for i in range(len(fractions))]
    rng = rng_for(seed, "split", split.name)
    buckets = [[] for _ in fractions]
    for c in range(split.classes):
        idx = np.flatnonzero(split.labels == c)
        idx = idx[rng.permutation(len(idx))]
        cuts = np.floor(np.cumsum(fractions) * len(idx)).astype(int)
        cuts[-1] = len(idx)  # floor rounding must not drop the tail
        start = 0
        for b, stop in enumerate(cuts):
            buckets[b].extend(idx[start:stop].tolist())
            start = stop
    out = []
    for b, name in zip(buckets, names):
        order = np.array(sorted(b), dtype=np.int64)
        out.append(DatasetSplit(name, split.images[order], split.labels[order], split.classes))
    return out


def subsample_stratified(split: DatasetSplit, per_class: int, seed: int,
                         name=None) -> DatasetSplit:
    """Fixed-seed class-balanced subsample (for desk-scale CIFAR subsets)."""
    rng = rng_for(seed, "subsample", split.name)
    keep = []
    for c in range(split.classes):
        idx = np.flatnonzero(split.labels == c)
        if len(idx) < per_class:
            raise ValueError(f"class {c} has only {len(idx)} examples, need {per_class}")
        keep.extend(idx[rng.permutation(len(idx))[:per_class]].tolist())
    order = np.array(sorted(keep), dtype=np.int64)
    return DatasetSplit(name or f"{split.name}-sub{per_class}",
                        split.images[order], split.labels[order], split.classes)


def batches(split: DatasetSplit, batch_size: int, shuffle_seed=None):
    """Yield (images, labels, example_indices) minibatches covering the
    split exactly once; order is a fixed permutation of the split order
    when a shuffle seed is given, stable otherwise."""
    if len(split) == 0:
        raise ValueError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if shuffle_seed is None:
        order = np.arange(len(split))
    else:
        order = rng_for(shuffle_seed, "shuffle").permutation(len(split))
    for lo in range(0, len(split), batch_size):
        idx = order[lo:lo + batch_size]
        yield split.images[idx], split.labels[idx], idx


# ---------------------------------------------------------------------------
# Image export / import
# ---------------------------------------------------------------------------

def _to_uint8(image) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image) -> None:
    """Write a [0,1] float image as PNG or binary PPM, chosen by suffix."""
    path = str(path)
    u8 = _to_uint8(image)
    if path.endswith(".ppm"):
        if u8.ndim == 3 and u8.shape[2] == 1:
            u8 = np.repeat(u8, 3, axis=2)
        if u8.ndim != 3 or u8.shape[2] != 3:
            raise ValueError(f"PPM export needs HxWx1 or HxWx3, got {u8.shape}")
        with open(path, "wb") as f:
            f.write(f"P6\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode())
            f.write(u8.tobytes())
    elif path.endswith(".png"):
        if u8.ndim == 3 and u8.shape[2] == 1:
            Image.fromarray(u8[:, :, 0], mode="L").save(path)
        else:
            Image.fromarray(u8, mode="RGB").save(path)
    else:
        raise ValueError(f"unsupported image suffix: {path}")


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM back into a [0,1] float image (H, W, C)."""
    path = str(path)
    if path.endswith(".ppm"):
        with open(path, "rb") as f:
            if f.readline().strip() != b"P6":
                raise DataFormatError(f"{path}: not a binary PPM")
            dims = f.readline().split()
            w, h = int(dims[0]), int(dims[1])
            maxval = int(f.readline())
            if maxval != 255:
                raise DataFormatError(f"{path}: only maxval 255 supported")
            raw = f.read(w * h * 3)
            if len(raw) != w * h * 3:
                raise DataFormatError(f"{path}: truncated PPM payload")
            u8 = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    elif path.endswith(".png"):
        img = Image.open(path)
        u8 = np.asarray(img)
        if u8.ndim == 2:
            u8 = u8[:, :, None]
    else:
        raise ValueError(f"unsupported image suffix: {path}")
    return u8 / 255.0


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

@dataclass
class DatasetBundle:
    """Train/val/test splits plus the manifest that produced them."""

    train: DatasetSplit
    val: DatasetSplit
    test: DatasetSplit
    classes: int
    manifest: dict = field(default_factory=dict)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in (self.train, self.val, self.test):
            h.update(s.content_hash().encode())
        return h.hexdigest()


def load_dataset(manifest) -> DatasetBundle:
    """Build a DatasetBundle from a manifest dict or JSON file path.

    Formats:
      blobs    -- {"format": "blobs", "classes", "size", "noise",
                   "per_class": {"train", "val", "test"},
                   "seeds": {"train", "val", "test"}}
      idx      -- {"format": "idx", "train_images", "train_labels",
                   "test_images", "test_labels", "val_fraction", "split_seed",
                   "subsample_per_class"?}
      cifar10  -- {"format": "cifar10", "train_batches": [...], "test_batch",
                   "val_fraction", "split_seed", "subsample_per_class"?}
    """
    if not isinstance(manifest, dict):
        with open(manifest) as f:
            manifest = json.load(f)
    fmt = manifest.get("format")
    if fmt == "blobs":
        classes = int(manifest.get("classes", 10))
        size = int(manifest.get("size", 20))
        noise = float(manifest.get("noise", 0.08))
        per = manifest.get("per_class", {"train": 144, "val": 64, "test": 64})
        seeds = manifest.get("seeds", {"train": 1, "val": 2, "test": 3})
        splits = {
            part: synth_blobs(classes, int(per[part]), size, int(seeds[part]),
                              noise=noise, name=f"blobs-{part}")
            for part in ("train", "val", "test")
        }
        return DatasetBundle(splits["train"], splits["val"], splits["test"],
                             classes, manifest)
    if fmt == "idx":
        full = load_idx(manifest["train_images"], manifest["train_labels"], name="train")
        test = load_idx(manifest["test_images"], manifest["test_labels"], name="test")
        return _carve_val(full, test, manifest)
    if fmt == "cifar10":
        full = load_cifar10_binary(manifest["train_batches"], name="train")
        test = load_cifar10_binary(manifest["test_batch"], name="test")
        return _carve_val(full, test, manifest)
    raise ValueError(f"unknown dataset format: {fmt!r}")


def _carve_val(full: DatasetSplit, test: DatasetSplit, manifest: dict) -> DatasetBundle:
    seed = int(manifest.get("split_seed", 0))
    per = manifest.get("subsample_per_class")
    if per is not None:
        full = subsample_stratified(full, int(per), seed)
        test_per = max(1, int(per) // 2)
        if len(test) >= test_per * test.classes:
            test = subsample_stratified(test, test_per, seed, name="test-sub")
    vf = float(manifest.get("val_fraction", 0.2))
    train, val = stratified_split(full, [1.0 - vf, vf], seed, names=["train", "val"])
    return DatasetBundle(train, val, test, full.classes, manifest)
