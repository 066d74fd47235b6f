"""Image I/O, dataset manifests, bicubic resampling and augmentation.

Images are float arrays shaped [3, H, W] with values on the [0, 255] scale.
A dataset directory holds HR PNGs plus ``manifest.txt`` whose lines read
``<split> <relative-path>``; LR inputs are synthesized with
:func:`bicubic_resize`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ParameterError

MANIFEST = "manifest.txt"
SUPPORTED_FACTORS = {Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2), Fraction(4)}


@dataclass
class ImagePair:
    lr: np.ndarray
    hr: np.ndarray
    id: str = ""


# ------------------------------------------------------------------------ I/O

def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG to a float64 [3, H, W] array; grayscale is replicated."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise OSError(f"{path}: unsupported format {im.format}")
            if im.mode in ("L", "LA", "I;16", "1"):
                im = im.convert("L").convert("RGB")
            elif im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
    except (FileNotFoundError, Image.UnidentifiedImageError) as e:
        raise OSError(f"cannot read {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def read_manifest(root) -> list[tuple[str, str]]:
    entries = []
    for line in (Path(root) / MANIFEST).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        split, rel = line.split(maxsplit=1)
        entries.append((split, rel))
    return entries


def write_manifest(root, entries: Sequence[tuple[str, str]]) -> None:
    text = "".join(f"{split} {rel}\n" for split, rel in entries)
    (Path(root) / MANIFEST).write_text(text)


def load_split(root, split: str, scale: int) -> list[ImagePair]:
    """HR images of ``split`` cropped to a multiple of ``scale`` with bicubic LR."""
    pairs = []
    for s, rel in read_manifest(root):
        if s != split:
            continue
        hr = load_image(Path(root) / rel)
        h, w = (hr.shape[1] // scale) * scale, (hr.shape[2] // scale) * scale
        hr = hr[:, :h, :w]
        lr = np.clip(bicubic_resize(hr, Fraction(1, scale)), 0, 255)
        pairs.append(ImagePair(lr, hr, rel))
    return pairs


# ------------------------------------------------------------------- bicubic

def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return np.where(ax <= 1, (a + 2) * ax3 - (a + 3) * ax2 + 1,
                    np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0))


def _resize_matrix(n_in: int, n_out: int, factor: float) -> np.ndarray:
    # pixel-center alignment; the kernel is stretched when shrinking (antialias)
    stretch = min(factor, 1.0)
    width = 4.0 / stretch
    u = (np.arange(n_out) + 0.5) / factor - 0.5
    left = np.floor(u - width / 2).astype(int)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = stretch * _cubic(stretch * (u[:, None] - idx))
    wts /= wts.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(m, (rows, np.clip(idx, 0, n_in - 1).ravel()), wts.ravel())
    return m


def bicubic_resize(img: np.ndarray, factor) -> np.ndarray:
    """Resize a [C, H, W] image by 1/4, 1/2, 1, 2 or 4 with the a = -0.5 cubic kernel.

    Borders are clamped (replicated); downscaling widens the kernel by the
    inverse factor.
    """
    f = Fraction(factor).limit_denominator(16)
    if f not in SUPPORTED_FACTORS:
        raise ParameterError(f"unsupported resize factor {factor}")
    if f == 1:
        return np.array(img, dtype=np.float64, copy=True)
    _, h, w = img.shape
    mh = _resize_matrix(h, int(round(h * f)), float(f))
    mw = _resize_matrix(w, int(round(w * f)), float(f))
    return np.einsum("oh,chw,pw->cop", mh, np.asarray(img, dtype=np.float64), mw)


# --------------------------------------------------------------- augmentation

def augment_choice(rng: np.random.Generator) -> tuple[bool, int]:
    """(horizontal flip?, number of 90-degree rotations)."""
    return bool(rng.integers(2)), int(rng.integers(4))


def apply_augment(img: np.ndarray, flip: bool, rot: int) -> np.ndarray:
    if flip:
        img = img[..., ::-1]
    if rot:
        img = np.rot90(img, rot, axes=(-2, -1))
    return np.ascontiguousarray(img)


def preprocess(pair: ImagePair, mean_rgb=(0.0, 0.0, 0.0), augment: bool = False,
               rng: np.random.Generator | None = None) -> ImagePair:
    """Subtract ``mean_rgb`` from both images and optionally apply one shared
    random flip/rotation."""
    m = np.asarray(mean_rgb, dtype=np.float64)[:, None, None]
    lr, hr = pair.lr - m, pair.hr - m
    if augment:
        if rng is None:
            raise ParameterError("augment=True needs an rng")
        flip, rot = augment_choice(rng)
        lr, hr = apply_augment(lr, flip, rot), apply_augment(hr, flip, rot)
    return ImagePair(lr, hr, pair.id)


def random_patch(pair: ImagePair, lr_patch: int, scale: int, rng: np.random.Generator) -> ImagePair:
    _, h, w = pair.lr.shape
    if lr_patch > min(h, w):
        raise ParameterError(f"patch {lr_patch} larger than LR image {h}x{w}")
    y = int(rng.integers(h - lr_patch + 1))
    x = int(rng.integers(w - lr_patch + 1))
    lr = pair.lr[:, y:y + lr_patch, x:x + lr_patch]
    hr = pair.hr[:, y * scale:(y + lr_patch) * scale, x * scale:(x + lr_patch) * scale]
    return ImagePair(lr, hr, pair.id)


def batches(pairs: Sequence[ImagePair], batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Stack consecutive pairs into (lr, hr) batches; last batch may be short."""
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        yield np.stack([p.lr for p in chunk]), np.stack([p.hr for p in chunk])


def mean_rgb(pairs: Sequence[ImagePair]) -> np.ndarray:
    return np.mean([p.hr.mean(axis=(1, 2)) for p in pairs], axis=0)


# ------------------------------------------------------------- toy corpus

def _band_texture(rng: np.random.Generator, size: int, lo: float, hi: float) -> np.ndarray:
    """Unit-variance Gaussian noise restricted to radial frequencies [lo, hi] (cycles/pixel)."""
    f = np.fft.fftfreq(size)
    r = np.hypot(*np.meshgrid(f, f, indexing="ij"))
    spec = (rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))) * ((r >= lo) & (r <= hi))
    t = np.real(np.fft.ifft2(spec))
    return t / (t.std() + 1e-12)


def synth_image(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    """A random scene: smooth background, flat shapes, slight optical blur and
    two soft-edged patches of fine band-limited texture."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    c0, c1 = rng.uniform(30, 220, 3), rng.uniform(30, 220, 3)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0, 255, 3)[:, None, None]
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img = np.where(mask[None], color, img)
    img = np.stack([gaussian_filter(c, 0.5) for c in img])

    region = np.zeros((size, size))
    for _ in range(2):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        region = np.maximum(region, (yy - cy) ** 2 + (xx - cx) ** 2 < rng.uniform(0.04, 0.12))
    region = gaussian_filter(region.astype(np.float64), 2)
    if rng.random() < 0.3:
        tex = np.stack([_band_texture(rng, size, 0.08, 0.22) for _ in range(3)])
    else:
        tex = np.repeat(_band_texture(rng, size, 0.08, 0.22)[None], 3, axis=0)
    return np.clip(img + 25.0 * region[None] * tex, 0, 255)


def make_toy_corpus(root, n_images: int = 20, size: int = 96, n_val: int = 4,
                    seed: int = 0) -> Path:
    """Write ``n_images`` synthetic HR PNGs and a manifest (last ``n_val`` are val)."""
    root = Path(root)
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_images):
        name = f"img_{i:03d}.png"
        save_image(root / name, synth_image(rng, size))
        entries.append(("val" if i >= n_images - n_val else "train", name))
    write_manifest(root, entries)
    return root
