"""Image decode/encode (PNG, binary PPM) as C x H x W float arrays in [0, 1]."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


def load_image(path: str | Path) -> np.ndarray:
    """Decode to 3 x H x W float32; grayscale inputs are channel-tripled."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("L", "I", "I;16", "F", "1"):
            arr = np.asarray(im.convert("L"))
            arr = np.stack([arr] * 3, axis=-1)
        else:
            arr = np.asarray(im.convert("RGB"))
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    """H x W x 3 bytes with pixel = round(value * 255) clamped to [0, 255]."""
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    return np.clip(np.round(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def crop_to_multiple(img: np.ndarray, multiple: int = 4, source: str = "") -> np.ndarray:
    _, h, w = img.shape
    nh, nw = h - h % multiple, w - w % multiple
    if (nh, nw) == (h, w):
        return img
    log.warning("center-cropping %s from %dx%d to %dx%d", source or "image", h, w, nh, nw)
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[:, top:top + nh, left:left + nw].copy()


def resize_center_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Scale the shorter side to ``size`` then take the central size x size square."""
    _, h, w = img.shape
    if (h, w) != (size, size):
        scale = size / min(h, w)
        nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
        pil = Image.fromarray(to_uint8(img), mode="RGB").resize((nw, nh), Image.BICUBIC)
        img = np.asarray(pil).astype(np.float32).transpose(2, 0, 1) / 255.0
        top, left = (nh - size) // 2, (nw - size) // 2
        img = img[:, top:top + size, left:left + size]
    return np.ascontiguousarray(img, dtype=np.float32)


def fit_to_size(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize to cover h x w, then take the central h x w window."""
    side = max(h, w)
    sq = resize_center_crop(img, side)
    top, left = (side - h) // 2, (side - w) // 2
    return np.ascontiguousarray(sq[:, top:top + h, left:left + w])


def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dir(directory: str | Path, size: int | None = None) -> tuple[list[Path], list[np.ndarray]]:
    """Load every readable image in a directory; unreadable files are skipped with a warning."""
    paths, images = [], []
    for p in list_images(directory):
        try:
            img = load_image(p)
        except Exception as exc:  # PIL raises a variety of types for corrupt files
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        img = resize_center_crop(img, size) if size else crop_to_multiple(img, 4, str(p))
        paths.append(p)
        images.append(img)
    return paths, images
