"""Deterministic synthetic shape-classification dataset.

Eight classes of geometric primitives rendered at 4x supersampling on a
random colour background, with random position, scale, contrast and
additive Gaussian pixel noise (sigma 0.05), clamped to [0, 1].
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "CLASSES",
    "GENERATOR_VERSION",
    "DeskDataset",
    "render_split",
    "generate",
    "gen_data",
    "load_dataset",
    "write_dds",
    "read_dds",
]

CLASSES = ("circle", "square", "triangle", "cross", "h-line", "v-line", "diagonal", "checker")
GENERATOR_VERSION = 1
MAGIC = b"DDS1"
SIZE = 16
SUPER = 4
NOISE_SIGMA = 0.05


def _shape_mask(cls: int, rng: np.random.Generator) -> np.ndarray:
    """Coverage mask in [0, 1] at SIZE x SIZE."""
    n = SIZE * SUPER
    # pixel-centre coordinates in output-pixel units
    c = (np.arange(n) + 0.5) / SUPER
    yy, xx = np.meshgrid(c, c, indexing="ij")
    s = rng.uniform(6.0, 12.0)
    half = s / 2
    cy = rng.uniform(half + 0.5, SIZE - half - 0.5)
    cx = rng.uniform(half + 0.5, SIZE - half - 0.5)
    dy, dx = yy - cy, xx - cx
    t = rng.uniform(1.0, 2.0)  # stroke width
    name = CLASSES[cls]
    if name == "circle":
        m = dy**2 + dx**2 <= half**2
    elif name == "square":
        h = half * 0.85
        m = (np.abs(dy) <= h) & (np.abs(dx) <= h)
    elif name == "triangle":
        # apex up; width grows linearly towards the base
        u = (dy + half) / s
        m = (u >= 0) & (u <= 1) & (np.abs(dx) <= u * half)
    elif name == "cross":
        m = ((np.abs(dy) <= t / 2) & (np.abs(dx) <= half)) | ((np.abs(dx) <= t / 2) & (np.abs(dy) <= half))
    elif name == "h-line":
        m = (np.abs(dy) <= t / 2) & (np.abs(dx) <= half)
    elif name == "v-line":
        m = (np.abs(dx) <= t / 2) & (np.abs(dy) <= half)
    elif name == "diagonal":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        m = (np.abs(dy - sign * dx) <= t / np.sqrt(2)) & (np.abs(dx) <= half * 0.8) & (np.abs(dy) <= half * 0.8)
    else:  # checker
        cell = rng.uniform(1.5, 2.5)
        inside = (np.abs(dy) <= half * 0.85) & (np.abs(dx) <= half * 0.85)
        m = inside & ((np.floor(dy / cell) + np.floor(dx / cell)) % 2 == 0)
    return m.reshape(SIZE, SUPER, SIZE, SUPER).mean(axis=(1, 3))


def render_image(cls: int, rng: np.random.Generator) -> np.ndarray:
    mask = _shape_mask(cls, rng)
    bg = rng.uniform(0.0, 1.0, size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction) + 1e-12
    contrast = rng.uniform(0.3, 0.7)
    fg = np.clip(bg + contrast * direction * np.sqrt(3), 0.0, 1.0)
    img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_split(count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced split; ``count`` must be a multiple of the class count."""
    k = len(CLASSES)
    if count % k:
        raise ValueError(f"split size {count} is not a multiple of {k}")
    labels = np.repeat(np.arange(k), count // k)
    labels = labels[rng.permutation(count)]
    images = np.stack([render_image(int(c), rng) for c in labels])
    return images.astype(np.float32), labels.astype(np.uint8)


@dataclass
class DeskDataset:
    seed: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_heldout: np.ndarray
    y_heldout: np.ndarray

    @property
    def x_distill(self) -> np.ndarray:
        return self.x_train

    @property
    def num_classes(self) -> int:
        return len(CLASSES)


def generate(seed: int, train: int = 4096, heldout: int = 1024) -> DeskDataset:
    """Render both splits in memory (float64 views of the fp32 pixels)."""
    rng = np.random.default_rng([GENERATOR_VERSION, seed])
    xt, yt = render_split(train, rng)
    xh, yh = render_split(heldout, rng)
    return DeskDataset(seed, xt.astype(np.float64), yt.astype(np.int64), xh.astype(np.float64), yh.astype(np.int64))


def write_dds(path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    n, c, h, w = images.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<4I", n, c, h, w))
        f.write(np.ascontiguousarray(images, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_dds(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a DDS1 file")
    n, c, h, w = struct.unpack_from("<4I", raw, 4)
    off = 20
    count = n * c * h * w
    if len(raw) != off + 4 * count + n:
        raise ValueError(f"{path}: size does not match header")
    images = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + 4 * count)
    return images, labels


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def gen_data(seed: int, out_dir: str | Path, train: int = 4096, heldout: int = 1024) -> dict:
    """Write train/held-out DDS1 files plus a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(seed, train, heldout)
    write_dds(out / "train.dds", ds.x_train, ds.y_train)
    write_dds(out / "heldout.dds", ds.x_heldout, ds.y_heldout)
    files = {name: _sha256(out / name) for name in ("train.dds", "heldout.dds")}
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "classes": list(CLASSES),
        "train": train,
        "heldout": heldout,
        "files": files,
        "content_hash": hashlib.sha256("".join(files[k] for k in sorted(files)).encode()).hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir: str | Path) -> DeskDataset:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    for name, digest in manifest["files"].items():
        if _sha256(d / name) != digest:
            raise ValueError(f"{d / name}: content hash does not match manifest")
    xt, yt = read_dds(d / "train.dds")
    xh, yh = read_dds(d / "heldout.dds")
    return DeskDataset(
        manifest["seed"],
        xt.astype(np.float64),
        yt.astype(np.int64),
        xh.astype(np.float64),
        yh.astype(np.int64),
    )
