"""Procedural image corpus for tests and toy training runs.

Content images are smooth scenes (gradients plus a few flat shapes); style
images are strongly textured (stripes, checkers, blotches, waves) with their
own two-colour palettes, so their feature statistics differ clearly from the
contents.  A style *family* is a (texture kind, palette) pair; held-out style
images are fresh renderings of the training families (new geometry and noise),
the toy analogue of unseen artworks by known artists.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def content_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    base = rng.uniform(0.2, 0.8, size=3)
    tilt = rng.uniform(-0.3, 0.3, size=(3, 2))
    img = base[:, None, None] + tilt[:, 0, None, None] * yy + tilt[:, 1, None, None] * xx
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0, 1, size=3)
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.1, 0.3)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[:, mask] = color[:, None]
    return np.clip(img, 0, 1).astype(np.float32)


KINDS = ("stripes", "checks", "blotches", "waves")


def style_image(rng: np.random.Generator, size: int = 64, kind: str | None = None,
                palette: np.ndarray | None = None) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = kind or rng.choice(KINDS)
    c1, c2 = rng.uniform(0, 1, size=(2, 3)) if palette is None else palette
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4, 10)
        t = (np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period) > 0).astype(float)
    elif kind == "checks":
        p = int(rng.integers(3, 9))
        t = ((yy // p + xx // p) % 2).astype(float)
    elif kind == "waves":
        f1, f2 = rng.uniform(0.1, 0.5, size=2)
        t = 0.5 + 0.5 * np.sin(f1 * xx + 3 * np.sin(f2 * yy))
    else:
        noise = rng.uniform(0, 1, size=(size // 4 + 1, size // 4 + 1))
        t = np.kron(noise, np.ones((4, 4)))[:size, :size]
        t = (t > 0.5).astype(float)
    img = c1[:, None, None] * t + c2[:, None, None] * (1 - t)
    img += rng.normal(0, 0.04, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def _families(rng: np.random.Generator, n_style: int) -> list[tuple[str, np.ndarray]]:
    return [(KINDS[i % len(KINDS)], rng.uniform(0, 1, size=(2, 3))) for i in range(n_style)]


def make_corpus(n_content: int = 8, n_style: int = 4, size: int = 64, seed: int = 0):
    """``n_content`` content and ``n_style`` style images, one style per family."""
    rng = np.random.default_rng(seed)
    contents = [content_image(rng, size) for _ in range(n_content)]
    styles = [style_image(rng, size, kind, palette) for kind, palette in _families(rng, n_style)]
    return contents, styles


def write_corpus(root: str | Path, n_content: int = 8, n_style: int = 4, size: int = 64, seed: int = 0,
                 held_out: int = 2) -> dict[str, Path]:
    """Write train/held-out content and style PNGs under ``root``.

    Held-out contents are new scenes; held-out style ``i`` is a new rendering of
    training family ``i mod n_style``.
    """
    from .imageio import save_image

    rng = np.random.default_rng(seed)
    contents = [content_image(rng, size) for _ in range(n_content + held_out)]
    families = _families(rng, n_style)
    styles = [style_image(rng, size, kind, palette) for kind, palette in families]
    styles += [style_image(rng, size, *families[i % n_style]) for i in range(held_out)]
    dirs = {name: Path(root) / name for name in ("content", "style", "heldout_content", "heldout_style")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(contents):
        target = dirs["content"] if i < n_content else dirs["heldout_content"]
        save_image(img, target / f"c{i:02d}.png")
    for i, img in enumerate(styles):
        target = dirs["style"] if i < n_style else dirs["heldout_style"]
        save_image(img, target / f"s{i:02d}.png")
    return dirs


def heldout_pairs(dirs: dict[str, Path]) -> list[tuple[str, np.ndarray, str, np.ndarray]]:
    """Held-out (content i, style i) pairs in name order, ready for ``evaluate_pairs``."""
    from .imageio import load_dir

    cpaths, contents = load_dir(dirs["heldout_content"])
    spaths, styles = load_dir(dirs["heldout_style"])
    return [(cp.name, c, sp.name, s) for cp, c, sp, s in zip(cpaths, contents, spaths, styles)]
