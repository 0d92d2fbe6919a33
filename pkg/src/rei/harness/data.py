"""Image datasets, resampling and PSNR."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..noise import NoiseParams, RngStream

IMAGE_SUFFIXES = (".pgm", ".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


class DatasetError(ValueError):
    pass


def psnr(x_hat, x_ref, peak: float = 1.0) -> float:
    """10 log10(peak² / MSE); +inf when the images agree exactly.

    Two-channel inputs of shape (2, H, W) are treated as real/imaginary parts
    and compared as magnitude images.
    """
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim >= 3 and a.shape[-3] == 2:
        a, b = np.hypot(a[..., 0, :, :], a[..., 1, :, :]), np.hypot(b[..., 0, :, :], b[..., 1, :, :])
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge samples clamped
    W = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        s = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(s))
        hi = min(lo + 1, n_in - 1)
        t = s - lo
        W[i, lo] += 1 - t
        W[i, hi] += t
    return W


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resample a 2-D image to side x side (pixel centres at +0.5)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    return _interp_matrix(img.shape[0], side) @ img @ _interp_matrix(img.shape[1], side).T


def center_crop(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                return arr / (65535.0 if im.mode.startswith("I;16") else max(arr.max(), 1.0))
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def _read_raw(path: Path) -> np.ndarray:
    sidecar = path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"missing or invalid sidecar {sidecar}") from exc
    if meta.get("dtype") != "f64le":
        raise DatasetError(f"{sidecar}: dtype must be 'f64le'")
    shape = tuple(int(s) for s in meta["shape"])
    data = path.read_bytes()
    if len(data) != 8 * int(np.prod(shape)):
        raise DatasetError(f"{path}: size does not match shape {shape}")
    arr = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected a 2-D grayscale tensor")
    if arr.min() < 0 or arr.max() > 1:
        span = arr.max() - arr.min()
        arr = (arr - arr.min()) / span if span > 0 else np.zeros_like(arr)
    return arr


def load_images(path, side: int) -> np.ndarray:
    """Read every image in ``path`` (sorted by name) as (N, side, side) in [0, 1]."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES + (".f64",))
    if not files:
        raise DatasetError(f"no images found in {root}")
    out = []
    for p in files:
        img = _read_raw(p) if p.suffix.lower() == ".f64" else _read_image(p)
        out.append(np.clip(resize_bilinear(center_crop(img), side), 0.0, 1.0))
    return np.stack(out)


def synthetic_images(count: int, side: int, seed: int = 0) -> np.ndarray:
    """Piecewise-smooth test images: overlapping rectangles and ellipses on a gradient."""
    out = np.empty((count, side, side))
    yy, xx = np.mgrid[:side, :side] / side
    for i in range(count):
        rng = RngStream(seed, i, 0, "synthetic").generator()
        angle = rng.uniform(0, 2 * np.pi)
        img = rng.uniform(0.2, 0.6) + 0.2 * rng.uniform(-1, 1) * (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5))
        for _ in range(rng.integers(3, 7)):
            val = rng.uniform(0.0, 1.0)
            if rng.uniform() < 0.5:
                y0, x0 = rng.uniform(0, 0.8, 2)
                h, w = rng.uniform(0.15, 0.5, 2)
                shape = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
            else:
                cy, cx = rng.uniform(0.1, 0.9, 2)
                ry, rx = rng.uniform(0.08, 0.3, 2)
                shape = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
            img = np.where(shape, val, img)
        img = gaussian_filter(img, 0.7, mode="nearest")
        out[i] = np.clip(img, 0.0, 1.0)
    return out


@dataclass
class Dataset:
    """Ground truth x (N, C, H, W), clean measurements u = A(x), noisy y."""

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    train: np.ndarray
    test: np.ndarray


def simulate(images: np.ndarray, A, noise: NoiseParams, seed: int, n_train: int,
             n_test: int | None = None) -> Dataset:
    """Measure ``images`` once; item i's noise is keyed by (seed, i)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    n_test = len(x) - n_train if n_test is None else n_test
    if n_train < 1 or n_test < 0 or n_train + n_test > len(x):
        raise DatasetError(f"cannot split {len(x)} images into {n_train} train / {n_test} test")
    u = np.asarray(A.apply(x))
    ys = []
    for i, ui in enumerate(u):
        yi = noise.sample(ui, RngStream(seed, i, 0, "meas-noise"))
        if A.meas_mask is not None:
            yi = yi * A.meas_mask
        ys.append(yi)
    return Dataset(x, u, np.stack(ys), np.arange(n_train), np.arange(n_train, n_train + n_test))


def load_dataset(path, side: int, A, noise: NoiseParams, seed: int = 0, n_train: int | None = None,
                 n_test: int = 0) -> Dataset:
    """``load_images`` followed by ``simulate``; all images train by default."""
    images = load_images(path, side)
    n_train = len(images) - n_test if n_train is None else n_train
    return simulate(images, A, noise, seed, n_train, n_test)
