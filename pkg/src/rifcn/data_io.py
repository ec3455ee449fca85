"""Raster ingestion, label palettes, patch sampling, flip augmentation and
sliding-window prediction over whole tiles."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from . import ntr
from .model import IGNORE, RiFCNModel, predict

ISPRS_PALETTE = (
    ("impervious_surfaces", (255, 255, 255)),
    ("building", (0, 0, 255)),
    ("low_vegetation", (0, 255, 255)),
    ("tree", (0, 255, 0)),
    ("car", (255, 255, 0)),
    ("clutter", (255, 0, 0)),
)
BINARY_PALETTE = (
    ("background", (255, 255, 255)),
    ("building", (0, 0, 255)),
)
MAX_SIDE = 1 << 16


class RasterError(ValueError):
    pass


def palette_for(num_classes: int):
    """ISPRS legend truncated to ``num_classes``; binary tasks use two entries."""
    if num_classes == 1:
        return BINARY_PALETTE
    if not 2 <= num_classes <= len(ISPRS_PALETTE):
        raise ValueError(f"no built-in palette for {num_classes} classes")
    return ISPRS_PALETTE[:num_classes]


def _check_palette(palette):
    colors = [tuple(c) for _, c in palette]
    if len(set(colors)) != len(colors):
        raise ValueError("palette colors must be unique")
    return colors


_PNM_HEADER = re.compile(rb"(P[56])(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)"
                         rb"(?:\s|#[^\n]*\n)+(\d+)\s")


def decode_pnm(data: bytes) -> np.ndarray:
    """Binary 8-bit P5/P6 to a uint8 array (c, h, w)."""
    m = _PNM_HEADER.match(data)
    if m is None:
        if data[:2] not in (b"P5", b"P6"):
            raise RasterError("bad magic")
        raise RasterError("malformed netpbm header")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise RasterError(f"only maxval 255 is supported, got {maxval}")
    if not (1 <= w <= MAX_SIDE and 1 <= h <= MAX_SIDE):
        raise RasterError(f"dimension overflow: {w}x{h}")
    c = 3 if kind == b"P6" else 1
    payload = data[m.end():]
    need = w * h * c
    if len(payload) < need:
        raise RasterError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, c)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def encode_pnm(arr: np.ndarray) -> bytes:
    """uint8 (c, h, w) with c in {1, 3} to binary P5/P6."""
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    if c not in (1, 3):
        raise RasterError(f"netpbm holds 1 or 3 channels, got {c}")
    kind = b"P5" if c == 1 else b"P6"
    body = np.ascontiguousarray(arr.astype(np.uint8).transpose(1, 2, 0)).tobytes()
    return kind + f"\n{w} {h}\n255\n".encode("ascii") + body


def read_raw(path) -> np.ndarray:
    """Raw file contents: uint8 (c, h, w) for netpbm, the stored array for NTR."""
    data = Path(path).read_bytes()
    if data[:4] == ntr.MAGIC:
        try:
            arr = ntr.decode(data)
        except ntr.NTRError as exc:
            raise RasterError(str(exc)) from None
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise RasterError(f"NTR raster must be 2-D or 3-D, got shape {arr.shape}")
        return arr
    return decode_pnm(data)


def read_raster(path) -> np.ndarray:
    """Image as float (c, h, w): 8-bit sources scaled by 1/255, float NTR passed through."""
    arr = read_raw(path)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if not np.isfinite(arr).all():
        raise RasterError("raster contains non-finite values")
    return arr


def write_raster(path, arr: np.ndarray) -> None:
    """Write ``.ppm``/``.pgm`` (uint8, quantized from [0, 1] floats) or ``.ntr`` (verbatim)."""
    path = Path(path)
    if path.suffix.lower() == ".ntr":
        data = ntr.encode(arr)
    else:
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        data = encode_pnm(arr)
    ntr.atomic_write(path, data)


def decode_labels(rgb: np.ndarray, palette=ISPRS_PALETTE) -> np.ndarray:
    """Exact-color lookup of a uint8 (3, h, w) raster; unmatched colors become IGNORE."""
    colors = _check_palette(palette)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise RasterError(f"label raster must be 3-channel, got shape {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.rint(np.asarray(rgb) * 255.0).astype(np.uint8)
    key = (rgb[0].astype(np.int64) << 16) | (rgb[1].astype(np.int64) << 8) | rgb[2]
    out = np.full(key.shape, IGNORE, dtype=np.uint8)
    for idx, (r, g, b) in enumerate(colors):
        out[key == ((r << 16) | (g << 8) | b)] = idx
    return out


def encode_labels(labels: np.ndarray, palette=ISPRS_PALETTE) -> np.ndarray:
    """Class indices (h, w) to a uint8 (3, h, w) raster; IGNORE renders black."""
    colors = _check_palette(palette)
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[: len(colors)] = colors
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= len(colors)))
    if bad.any():
        raise ValueError(f"label index {labels[bad].flat[0]} has no palette color")
    return np.ascontiguousarray(lut[labels.astype(np.int64)].transpose(2, 0, 1))


def grid_offsets(size: int, patch: int, stride: int) -> list[int]:
    """Regular offsets with the last window anchored to the far border."""
    if patch > size:
        raise ValueError(f"patch {patch} larger than extent {size}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    offs = list(range(0, size - patch + 1, stride))
    if offs[-1] != size - patch:
        offs.append(size - patch)
    return offs


def sample_patches(image: np.ndarray, labels: np.ndarray, patch: int, stride: int,
                   levels: int = 4):
    """Aligned (image, label) crops on a border-anchored grid, row-major order."""
    if patch % (2 ** levels):
        raise ValueError(f"patch size {patch} not divisible by 2^{levels}")
    h, w = labels.shape
    if image.shape[1:] != (h, w):
        raise ValueError("image and labels are not spatially aligned")
    if patch > min(h, w):
        raise ValueError(f"patch size {patch} exceeds tile {h}x{w}")
    return [
        (image[:, i:i + patch, j:j + patch].copy(), labels[i:i + patch, j:j + patch].copy())
        for i in grid_offsets(h, patch, stride)
        for j in grid_offsets(w, patch, stride)
    ]


FLIPS = ("h", "v", "hv")


def flip_pair(image: np.ndarray, labels: np.ndarray, mode: str):
    if mode not in FLIPS:
        raise ValueError(f"unknown flip {mode!r}")
    if "h" in mode:
        image, labels = image[..., ::-1], labels[..., ::-1]
    if "v" in mode:
        image, labels = image[..., ::-1, :], labels[..., ::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def augment_flips(patches, seed: int, probability: float = 0.75):
    """Flip each pair with probability 3/4, choosing h, v or hv uniformly."""
    rng = np.random.default_rng(seed)
    out = []
    for image, labels in patches:
        flip = rng.random() < probability
        choice = int(rng.integers(len(FLIPS)))
        out.append(flip_pair(image, labels, FLIPS[choice]) if flip else (image, labels))
    return out


def stitch_predict(model: RiFCNModel, tile: np.ndarray, patch: int, overlap: int = 0,
                   batch_size: int = 8) -> np.ndarray:
    """Average window probabilities over a whole (c, h, w) tile; returns (M, h, w)."""
    c, h, w = tile.shape
    if patch > min(h, w):
        raise ValueError(f"tile {h}x{w} smaller than patch {patch}")
    if not 0 <= overlap < patch:
        raise ValueError("overlap must lie in [0, patch)")
    stride = patch - overlap
    windows = [(i, j) for i in grid_offsets(h, patch, stride) for j in grid_offsets(w, patch, stride)]
    acc = np.zeros((model.num_classes, h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.float64)
    for s in range(0, len(windows), batch_size):
        chunk = windows[s:s + batch_size]
        x = np.stack([tile[:, i:i + patch, j:j + patch] for i, j in chunk])
        probs = predict(model, x.astype(model.dtype, copy=False))
        for (i, j), p in zip(chunk, probs):
            acc[:, i:i + patch, j:j + patch] += p
            hits[i:i + patch, j:j + patch] += 1
    return (acc / hits).astype(model.dtype)


def list_stems(directory, suffixes=(".ppm", ".pgm", ".ntr")) -> dict[str, Path]:
    directory = Path(directory)
    out = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in suffixes:
            out.setdefault(p.stem, p)
    return out


def load_pairs(root, palette):
    """``root/images/*`` paired by stem with ``root/labels/*.ppm``."""
    root = Path(root)
    img_dir, lab_dir = root / "images", root / "labels"
    for d in (img_dir, lab_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory: {d}")
    images, labels = list_stems(img_dir), list_stems(lab_dir, (".ppm",))
    unpaired = sorted(set(images) ^ set(labels))
    if unpaired:
        raise RasterError(f"unpaired stems: {', '.join(unpaired)}")
    if not images:
        raise RasterError(f"no images found in {img_dir}")
    pairs = []
    for stem in sorted(images):
        img = read_raster(images[stem])
        lab = decode_labels(read_raw(labels[stem]), palette)
        if img.shape[1:] != lab.shape:
            raise RasterError(f"{stem}: image {img.shape[1:]} and labels {lab.shape} differ")
        pairs.append((stem, img, lab))
    return pairs


def is_palette_pure(rgb: np.ndarray, palette) -> bool:
    return bool((decode_labels(rgb, palette) != IGNORE).all())


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path


def synth_tile(rng: np.random.Generator, size: int, num_classes: int, noise: float = 0.08):
    """One synthetic tile: random rectangles and disks per class on a noisy background.

    Returns ``(image float32 (3, size, size), labels uint8 (size, size))``.
    Every class paints with its own base color so the task is learnable.
    """
    palette = palette_for(num_classes)
    n_labels = len(palette)
    labels = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[:size, :size]
    for cls in range(1, n_labels):
        for _ in range(int(rng.integers(1, 3))):
            if rng.random() < 0.5:
                hh, ww = rng.integers(size // 8, size // 3 + 1, size=2)
                top, left = rng.integers(0, size - hh + 1), rng.integers(0, size - ww + 1)
                labels[top:top + hh, left:left + ww] = cls
            else:
                r = rng.uniform(size / 10, size / 5)
                cy, cx = rng.uniform(0, size, size=2)
                labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    base = np.array([c for _, c in palette], dtype=np.float32) / 255.0 * 0.6 + 0.2
    image = base[labels].transpose(2, 0, 1)
    image = image + rng.normal(0.0, noise, size=image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def write_synth_dataset(out_dir, n: int, size: int, num_classes: int, seed: int) -> list[str]:
    """Write ``n`` image/label PPM pairs under ``out_dir/images`` and ``out_dir/labels``."""
    if size % 16 or size < 16:
        raise ValueError("size must be a positive multiple of 16")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    img_dir, lab_dir = ensure_dir(Path(out_dir) / "images"), ensure_dir(Path(out_dir) / "labels")
    palette = palette_for(num_classes)
    stems = []
    for k in range(n):
        image, labels = synth_tile(rng, size, num_classes)
        stem = f"tile_{k:04d}"
        write_raster(img_dir / f"{stem}.ppm", image)
        write_raster(lab_dir / f"{stem}.ppm", encode_labels(labels, palette))
        stems.append(stem)
    return stems
