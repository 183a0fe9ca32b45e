"""Image I/O and the synthetic ERP generator used for desk-scale training."""
from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import erp_to_sphere, validate_erp
from .tensor import atomic_write


class InputError(ValueError):
    """Unreadable or malformed user input (maps to CLI exit code 2)."""


def read_png(path) -> np.ndarray:
    """RGB image as float64 in [0, 1] (exactly ``value / 255``)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def png_bytes(img: np.ndarray) -> bytes:
    arr = to_uint8(img)
    mode = "L" if arr.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr, mode).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, img: np.ndarray):
    atomic_write(str(path), png_bytes(img))


def read_erp(path) -> np.ndarray:
    img = read_png(path)
    try:
        return validate_erp(img)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def load_dataset(directory) -> list[np.ndarray]:
    """All ``*.png`` ERPs in ``directory`` sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"dataset directory {directory} does not exist")
    files = sorted(d.glob("*.png"))
    if not files:
        raise InputError(f"dataset directory {directory} holds no PNG images")
    return [read_erp(f) for f in files]


def synthetic_erp(height: int, rng: np.random.Generator, waves: int = 6, period: float = 90.0,
                  periodic_weight: float = 0.6) -> np.ndarray:
    """Smooth colour field on the sphere rendered as an ERP of ``height x 2*height``.

    Two parts are blended: random plane waves over 3D directions (content that
    differs between viewports) and a pattern periodic in longitude with the
    given period, so that viewports along a latitude row repeat each other.
    Each image gets its own palette.
    """
    W = 2 * height
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(height) + 0.5)
    d = np.stack(erp_to_sphere(u, v, (height, W)), axis=-1)
    lat = np.arcsin(np.clip(d[..., 1], -1, 1))
    lon = np.arctan2(d[..., 0], d[..., 2])

    field_ = np.zeros((height, W, 3))
    for _ in range(waves):
        k = rng.normal(size=3)
        k *= rng.uniform(2.0, 7.0) / np.linalg.norm(k)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(d @ k + phase)[..., None] * rng.normal(size=3)
    field_ /= np.sqrt(waves)

    reps = 360.0 / period
    periodic = np.zeros((height, W, 3))
    for j in range(1, 3):
        a = rng.uniform(0, 2 * np.pi)
        m = rng.uniform(1.5, 5.0)
        pat = np.sin(j * reps * lon + a) * np.cos(m * lat) + np.sin(m * 1.7 * lat + a)
        periodic += pat[..., None] * rng.normal(size=3)
    periodic /= 2.0

    mix = (1 - periodic_weight) * field_ + periodic_weight * periodic
    base = rng.uniform(0.3, 0.7, size=3)
    scale = rng.uniform(0.2, 0.35)
    return np.clip(base + scale * mix, 0.0, 1.0)


def synthetic_dataset(count: int, height: int, seed: int = 0, **kw) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_erp(height, rng, **kw) for _ in range(count)]


def write_dataset(directory, images):
    os.makedirs(directory, exist_ok=True)
    for i, img in enumerate(images):
        write_png(Path(directory) / f"erp_{i:04d}.png", img)
