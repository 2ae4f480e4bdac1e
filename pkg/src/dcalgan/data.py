"""Synthetic two-class grayscale data, image I/O and the [-1, 1] pixel scaling.

On disk a dataset is a directory holding ``manifest.txt`` plus one
subdirectory per class::

    root/
      manifest.txt        # lines "label +1 = pos", "label -1 = neg"
      pos/pos_0000.pgm
      neg/neg_0000.pgm

Images are 8-bit binary PGM (P5); PNG is accepted when Pillow is installed.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError

MANIFEST = "manifest.txt"
IMAGE_SUFFIXES = (".pgm", ".png")


# -- scaling -------------------------------------------------------------------


def normalize(raw) -> np.ndarray:
    """Map raw pixel values in [0, 255] onto [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise DataError(f"raw pixel values must lie in [0, 255], got [{raw.min()}, {raw.max()}]")
    return raw / 127.5 - 1.0


def denormalize(values) -> np.ndarray:
    """Inverse of :func:`normalize` (no rounding)."""
    return (np.asarray(values, dtype=np.float64) + 1.0) * 127.5


def to_uint8(values) -> np.ndarray:
    """Quantize [-1, 1] values to bytes: -1 -> 0, +1 -> 255."""
    return np.clip(np.rint(denormalize(values)), 0, 255).astype(np.uint8)


# -- image files ---------------------------------------------------------------


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise DataError("PGM output needs a 2-D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path: str | Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(blob, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DataError(f"{path}: bad PGM header") from exc
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    data = blob[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, optimize=False)
    else:
        write_pgm(path, pixels)


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image

            with Image.open(path) as im:
                if im.mode != "L":
                    raise DataError(f"{path}: expected an 8-bit grayscale PNG, got mode {im.mode}")
                return np.asarray(im, dtype=np.uint8).copy()
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
    return read_pgm(path)


# -- datasets ------------------------------------------------------------------


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (1, 1, S, S) in [-1, 1]
    label: int
    id: str


@dataclass
class Dataset:
    images: np.ndarray  # (n, 1, S, S) float32 in [-1, 1]
    labels: np.ndarray  # (n,) int8 in {+1, -1}
    ids: list[str]
    class_names: dict[int, str] = field(default_factory=lambda: {1: "pos", -1: "neg"})

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DataError(f"images must be (n, 1, S, S), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.ids) != len(self.images):
            raise DataError("images, labels and ids must have the same length")
        if not set(np.unique(self.labels)) <= {-1, 1}:
            raise DataError("labels must be +1 or -1")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i:i + 1], int(self.labels[i]), self.ids[i])

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    @property
    def size(self) -> int:
        return self.images.shape[-1]


@dataclass(frozen=True)
class ClassParams:
    blob_count: tuple[int, int]
    radius: tuple[float, float]  # fraction of the image side
    amplitude: tuple[float, float]
    texture_freq: float  # cycles per pixel, 0 for smooth blobs


@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 100
    size: int = 64
    seed: int = 0
    # optional (n_pos, n_neg) override, e.g. (23, 61) for an imbalanced set
    class_counts: tuple[int, int] | None = None
    # class +1: few large, smooth, bright blobs
    positive: ClassParams = ClassParams((1, 3), (0.14, 0.22), (1.2, 1.6), 0.0)
    # class -1: many small, high-frequency speckled blobs
    negative: ClassParams = ClassParams((8, 16), (0.03, 0.06), (0.6, 1.0), 0.35)
    background: float = -0.8
    noise_sigma: float = 0.05

    def counts(self) -> tuple[int, int]:
        return self.class_counts if self.class_counts is not None else (self.n_per_class, self.n_per_class)

    def validate(self) -> None:
        if self.size < 16:
            raise ConfigError("synthetic image size must be at least 16")
        if min(self.counts()) < 1:
            raise ConfigError("each class needs at least one image")
        for cp in (self.positive, self.negative):
            lo, hi = cp.blob_count
            if lo < 1 or hi < lo:
                raise ConfigError(f"empty blob count range {cp.blob_count}")
            for a, b in (cp.radius, cp.amplitude):
                if not 0 < a <= b:
                    raise ConfigError(f"empty parameter range ({a}, {b})")


def _render(rng: np.random.Generator, cp: ClassParams, spec: SynthSpec,
            yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    s = spec.size
    img = np.full((s, s), spec.background)
    for _ in range(rng.integers(cp.blob_count[0], cp.blob_count[1] + 1)):
        r = rng.uniform(*cp.radius) * s
        cy, cx = rng.uniform(r, s - r, size=2)
        amp = rng.uniform(*cp.amplitude)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        if cp.texture_freq > 0:
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * cp.texture_freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            bump = bump * (0.5 + 0.5 * wave)
        img += amp * bump
    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic two-class dataset; class +1 images come first."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    n_pos, n_neg = spec.counts()
    images, labels, ids = [], [], []
    for label, cp, count, name in ((1, spec.positive, n_pos, "pos"), (-1, spec.negative, n_neg, "neg")):
        for i in range(count):
            images.append(_render(rng, cp, spec, yy, xx))
            labels.append(label)
            ids.append(f"{name}_{i:04d}")
    arr = np.stack(images)[:, None].astype(np.float32)
    return Dataset(arr, np.array(labels, dtype=np.int8), ids)


def save_dataset(dataset: Dataset, directory: str | Path, fmt: str = "pgm") -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for label in (1, -1):
        name = dataset.class_names[label]
        lines.append(f"label {label:+d} = {name}")
        (root / name).mkdir(exist_ok=True)
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    for item in dataset:
        write_image(root / dataset.class_names[item.label] / f"{item.id}.{fmt}", to_uint8(item.pixels[0, 0]))
    return root


_MANIFEST_LINE = re.compile(r"^label\s+([+\-−]?1)\s*=\s*(\S+)\s*$")


def read_manifest(root: Path) -> dict[int, str]:
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"dataset manifest not found: {path}")
    mapping: dict[int, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _MANIFEST_LINE.match(line.strip())
        if not m:
            raise DataError(f"{path}:{lineno}: expected 'label <+1|-1> = <dir>'")
        label = -1 if m.group(1) in ("-1", "−1") else 1
        mapping[label] = m.group(2)
    if set(mapping) != {1, -1}:
        raise DataError(f"{path}: manifest must name a directory for both +1 and -1")
    return mapping


def load_dataset(directory: str | Path, size: int | None = None) -> Dataset:
    """Load a dataset directory; with ``size``, decimate by an exact integer factor."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    mapping = read_manifest(root)
    known = set(mapping.values())
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if sub.name not in known:
            raise DataError(f"unknown class directory {sub} (not listed in {MANIFEST})")

    images, labels, ids, paths = [], [], [], []
    for label in (1, -1):
        cdir = root / mapping[label]
        files = sorted(p for p in cdir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if cdir.is_dir() else []
        if not files:
            raise DataError(f"class {mapping[label]!r} (label {label:+d}) has no images in {cdir}")
        for f in files:
            px = read_image(f)
            if px.shape[0] != px.shape[1]:
                raise DataError(f"{f}: image is not square ({px.shape[1]}x{px.shape[0]})")
            images.append(px)
            labels.append(label)
            ids.append(f.stem)
            paths.append(f)

    # blame the files that disagree with the most common size
    shape, _ = Counter(px.shape for px in images).most_common(1)[0]
    for f, px in zip(paths, images):
        if px.shape != shape:
            raise DataError(f"{f}: size {px.shape[1]}x{px.shape[0]} differs from {shape[1]}x{shape[0]}")

    arr = np.stack(images)
    if size is not None and size != arr.shape[-1]:
        factor, rem = divmod(arr.shape[-1], size)
        if rem or factor < 1:
            raise DataError(f"images are {arr.shape[-1]} px; cannot decimate exactly to {size}")
        arr = arr[:, ::factor, ::factor]
    values = normalize(arr)[:, None].astype(np.float32)
    return Dataset(values, np.array(labels, dtype=np.int8), ids,
                   class_names={1: mapping[1], -1: mapping[-1]})
