"""Benchmark datasets: synthetic shape images with gaze maps, and PNG ingestion."""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .numeric import random_stream

SHAPES = ("circle", "square", "triangle", "cross", "diamond")
MIN_SIZE = 12


@dataclass
class BenchmarkDataset:
    images: np.ndarray            # (N, H, W, 3) uint8
    labels: np.ndarray | None     # (N,) int, or None when unknown
    gaze: np.ndarray | None       # (N, H, W) float64, each summing to 1
    name: str = "dataset"
    seed: int | None = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError("one label per image required")
        if self.gaze is not None:
            self.gaze = np.asarray(self.gaze, dtype=np.float64)
            if self.gaze.shape != self.images.shape[:3]:
                raise ValueError(f"gaze maps {self.gaze.shape} do not match images {self.images.shape[:3]}")
        if not self.names:
            self.names = [f"{i:04d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def has_gaze(self):
        return self.gaze is not None

    def checksum(self):
        import hashlib
        h = hashlib.sha256(self.images.tobytes())
        if self.gaze is not None:
            h.update(self.gaze.tobytes())
        return h.hexdigest()


def gaze_map(size, center, sigma):
    """Isotropic Gaussian density on a ``size`` x ``size`` grid, summing to 1."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = center
    g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def shape_mask(kind, size, center, radius):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - center[0]
    dx = xx - center[1]
    r = radius
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        s = r * 0.85
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == "triangle":
        # apex up, base at dy = +r/2
        return (dy <= r * 0.6) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.62)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape {kind!r}")


def background(size, rng):
    """Smooth colour ramp plus fine noise, values roughly in [30, 150]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(40, 110, size=3)
    slope = rng.uniform(-30, 30, size=(2, 3))
    img = base + yy[..., None] * slope[0] + xx[..., None] * slope[1]
    img = img + rng.normal(0, 8, size=(size, size, 3))
    return img


def render(kind, size, center, radius, rng):
    img = background(size, rng)
    mask = shape_mask(kind, size, center, radius)
    color = rng.uniform(170, 255, size=3)
    color[rng.integers(3)] = rng.uniform(0, 60)
    img[mask] = color + rng.normal(0, 4, size=(int(mask.sum()), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def gen_synthetic_dataset(n, size=32, classes=3, seed=0, name="synthetic"):
    """``n`` images, each one coloured shape (class = shape kind) on a textured background.

    Shape radius is drawn in [size/6, size/4]; the gaze map is a Gaussian
    centred on the shape with sigma equal to that radius.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE} to fit the shapes")
    if not 1 <= classes <= len(SHAPES):
        raise ValueError(f"classes must be in [1, {len(SHAPES)}]")
    rng = random_stream(seed, "dataset")
    labels = rng.permutation(np.arange(n) % classes)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    gaze = np.empty((n, size, size))
    for i in range(n):
        r = rng.uniform(size / 6, size / 4)
        margin = r + 1
        center = (rng.uniform(margin, size - 1 - margin), rng.uniform(margin, size - 1 - margin))
        images[i] = render(SHAPES[labels[i]], size, center, r, rng)
        gaze[i] = gaze_map(size, center, r)
    return BenchmarkDataset(images, labels, gaze, name=name, seed=seed)


# ------------------------------------------------------------------ disk I/O

def _gaze_to_png(g):
    peak = g.max()
    scaled = np.zeros_like(g) if peak <= 0 else g / peak
    return Image.fromarray(np.rint(scaled * 65535).astype(np.uint16))


def save_dataset(ds, out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if ds.has_gaze:
        (out / "gaze").mkdir(exist_ok=True)
    for i, nm in enumerate(ds.names):
        Image.fromarray(ds.images[i]).save(out / "images" / f"{nm}.png")
        if ds.has_gaze:
            _gaze_to_png(ds.gaze[i]).save(out / "gaze" / f"{nm}.png")
    manifest = {
        "name": ds.name,
        "seed": ds.seed,
        "n": len(ds),
        "image_shape": list(ds.image_shape),
        "files": [f"{nm}.png" for nm in ds.names],
        "labels": None if ds.labels is None else [int(v) for v in ds.labels],
        "has_gaze": ds.has_gaze,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return out


def _read_png(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from None


def load_external_dataset(images_dir, gaze_dir=None, name=None):
    """Load ``*.png`` images (RGB) and optional gaze PNGs matched by filename.

    Labels come from a ``manifest.json`` next to the images directory when
    one exists; otherwise they are unknown (evaluation only needs the
    model's own prediction).
    """
    images_dir = Path(images_dir)
    files = sorted(p for p in images_dir.glob("*.png"))
    if not files:
        raise ValueError(f"no PNG images in {images_dir}")
    images = []
    shape = None
    for p in files:
        arr = _read_png(p)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        arr = arr[..., :3]
        if arr.dtype != np.uint8:
            raise ValueError(f"{p.name}: expected 8-bit RGB, got {arr.dtype}")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(f"{p.name}: shape {arr.shape} differs from {shape}")
        images.append(arr)
    gaze = None
    if gaze_dir is not None:
        gaze_dir = Path(gaze_dir)
        maps = []
        for p in files:
            gp = gaze_dir / p.name
            if not gp.exists():
                raise FileNotFoundError(f"missing gaze map for {p.name}: {gp}")
            g = _read_png(gp).astype(np.float64)
            if g.ndim == 3:
                g = g[..., :3].mean(axis=2)
            if g.shape != shape[:2]:
                raise ValueError(f"gaze map {gp.name} has shape {g.shape}, image is {shape[:2]}")
            if g.sum() <= 0:
                raise ValueError(f"gaze map {gp.name} is empty")
            maps.append(g / g.sum())
        gaze = np.stack(maps)
    labels = None
    seed = None
    manifest = images_dir.parent / "manifest.json"
    if manifest.exists():
        with open(manifest) as fh:
            meta = json.load(fh)
        by_name = dict(zip(meta.get("files", []), meta.get("labels") or []))
        if all(p.name in by_name for p in files):
            labels = [by_name[p.name] for p in files]
        seed = meta.get("seed")
        name = name or meta.get("name")
    return BenchmarkDataset(np.stack(images), labels, gaze, name=name or images_dir.name, seed=seed,
                            names=[p.stem for p in files])


def load_dataset_dir(root):
    """Load a directory written by :func:`save_dataset`."""
    root = Path(root)
    gaze = root / "gaze"
    return load_external_dataset(root / "images", gaze if gaze.is_dir() else None)
