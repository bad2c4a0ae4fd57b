"""Evaluation: content/style loss, SSIM, inference time and model size per sequence index."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agent import AgentParams
from .errors import ContractError, DimensionError
from .features import FeatureBackbone
from .imageio import fit_to_size, load_dir
from .networks import count_params
from .objectives import content_loss, style_loss
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_INDICES = (1, 5, 10)
DISCLAIMER = (
    "# losses are measured with this artifact's stand-in feature backbone; "
    "absolute values are not comparable to published tables"
)
REPORT_FIELDS = ("content", "style", "index", "content_loss", "style_loss", "ssim", "seconds")


def _gray255(img) -> np.ndarray:
    x = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise DimensionError(f"ssim takes single images, got batch of {x.shape[0]}")
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise DimensionError(f"expected a 3 x H x W image, got {x.shape}")
    r, g, b = GRAY_WEIGHTS
    return 255.0 * (r * x[0] + g * x[1] + b * x[2])


def ssim(a, b) -> float:
    """Mean SSIM over non-overlapping 8x8 windows of the luma channel (0-255 scale).

    Uses population (1/n) statistics without Gaussian weighting; trailing rows
    and columns that do not fill a whole window are ignored.
    """
    ga, gb = _gray255(a), _gray255(b)
    if ga.shape != gb.shape:
        raise DimensionError(f"image sizes differ: {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    k = SSIM_WINDOW
    if h < k or w < k:
        raise DimensionError(f"images must be at least {k}x{k}, got {h}x{w}")
    nh, nw = h // k, w // k

    def windows(x):
        return x[: nh * k, : nw * k].reshape(nh, k, nw, k).transpose(0, 2, 1, 3).reshape(nh, nw, k * k)

    wa, wb = windows(ga), windows(gb)
    mu_a, mu_b = wa.mean(axis=-1), wb.mean(axis=-1)
    da, db = wa - mu_a[..., None], wb - mu_b[..., None]
    var_a, var_b = (da * da).mean(axis=-1), (db * db).mean(axis=-1)
    cov = (da * db).mean(axis=-1)
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class EvalRow:
    content: str
    style: str
    index: int
    content_loss: float
    style_loss: float
    ssim: float
    seconds: float  # inference time from the content image up to this index


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    params_m: float = 0.0
    storage_mb: float = 0.0

    def indices(self) -> list[int]:
        return sorted({r.index for r in self.rows})

    def aggregate(self, index: int) -> dict[str, float]:
        sel = [r for r in self.rows if r.index == index]
        if not sel:
            raise ContractError(f"no rows at sequence index {index}")
        return {
            name: float(np.mean([getattr(r, name) for r in sel]))
            for name in ("content_loss", "style_loss", "ssim", "seconds")
        }

    def summary(self) -> str:
        lines = [f"params: {self.params_m:.4f} M   storage: {self.storage_mb:.4f} MB"]
        lines.append(f"{'index':>5} {'content':>12} {'style':>12} {'ssim':>8} {'time(s)':>10}")
        for i in self.indices():
            a = self.aggregate(i)
            lines.append(
                f"{i:>5} {a['content_loss']:>12.6f} {a['style_loss']:>12.6f} {a['ssim']:>8.4f} {a['seconds']:>10.4f}"
            )
        return "\n".join(lines)

    def write(self, path: str | os.PathLike) -> None:
        """CSV rows (disclaimer comment first) plus a ``.summary.txt`` sidecar."""
        with open(path, "w", newline="") as fh:
            fh.write(DISCLAIMER + "\n")
            w = csv.writer(fh)
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                w.writerow([r.content, r.style, r.index, repr(r.content_loss), repr(r.style_loss),
                            repr(r.ssim), repr(r.seconds)])
        Path(str(path) + ".summary.txt").write_text(DISCLAIMER + "\n" + self.summary() + "\n")


def read_report_rows(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def evaluate_pairs(
    agent: AgentParams,
    backbone: FeatureBackbone,
    pairs: Sequence[tuple[str, np.ndarray, str, np.ndarray]],
    steps: int,
    indices: Sequence[int] = DEFAULT_INDICES,
    clock: Callable[[], float] = time.perf_counter,
) -> EvalReport:
    """Evaluate already-decoded (content name, content, style name, style) pairs."""
    from .trainer import rollout_step

    if steps < 1:
        raise ContractError("steps must be ≥ 1")
    wanted = sorted({int(i) for i in indices if 1 <= int(i) <= steps})
    if not wanted:
        wanted = [steps]
    count, nbytes = count_params(agent.actor.parameters() + agent.builder.parameters())
    report = EvalReport(params_m=count / 1e6, storage_mb=nbytes / 1e6)
    for cname, content, sname, style in pairs:
        c = Tensor(np.asarray(content, dtype=np.float32)[None])
        s = Tensor(np.asarray(style, dtype=np.float32)[None])
        moving, elapsed = c, 0.0
        for t in range(1, max(wanted) + 1):
            t0 = clock()
            moving = rollout_step(agent, moving, s)
            elapsed += clock() - t0
            if t in wanted:
                with no_grad():
                    l_co = content_loss(backbone, moving, c).item()
                    l_st = style_loss(backbone, moving, s).item()
                report.rows.append(EvalRow(cname, sname, t, l_co, l_st, ssim(c, moving), elapsed))
    return report


def evaluate(
    agent: AgentParams,
    backbone: FeatureBackbone,
    content_dir: str | os.PathLike,
    style_dir: str | os.PathLike,
    steps: int,
    indices: Sequence[int] = DEFAULT_INDICES,
    clock: Callable[[], float] = time.perf_counter,
) -> EvalReport:
    """Every (content, style) pair of two directories, in sorted-name order.

    Style images are resized/cropped to each content image's size; timing
    covers only the rollout, never image decoding.
    """
    cpaths, contents = load_dir(content_dir)
    spaths, styles = load_dir(style_dir)
    if not contents:
        raise FileNotFoundError(f"no readable images in {content_dir}")
    if not styles:
        raise FileNotFoundError(f"no readable images in {style_dir}")
    pairs = []
    for cp, c in zip(cpaths, contents):
        for sp, s in zip(spaths, styles):
            if s.shape != c.shape:
                s = fit_to_size(s, c.shape[1], c.shape[2])
            pairs.append((cp.name, c, sp.name, s))
    return evaluate_pairs(agent, backbone, pairs, steps, indices, clock)

