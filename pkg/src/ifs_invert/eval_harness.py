"""Evaluation protocol: random test suites, zoomed view sampling and shape/image metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import objective
from .errors import SuiteGenerationError
from .ifs_core import FractalCode, code_from_factors
from .splat_render import FULL_VIEW, ViewWindow, render_eval

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
MAX_REJECTIONS = 100


def binarize(img, tau: float = 0.5) -> np.ndarray:
    return np.asarray(img) >= tau


def _masks(R, I):
    R = np.asarray(R)
    I = np.asarray(I)
    if R.shape != I.shape:
        raise ValueError(f"shape mismatch: {R.shape} vs {I.shape}")
    return binarize(R), binarize(I)


def shape_metrics(R, I) -> tuple[float, float]:
    """F1 and IoU of the foreground masks (``R`` is the prediction)."""
    a, b = _masks(R, I)
    inter = int(np.count_nonzero(a & b))
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na == 0 and nb == 0:
        return 1.0, 1.0
    if na == 0 or nb == 0:
        return 0.0, 0.0
    union = na + nb - inter
    return 2.0 * inter / (na + nb), inter / union


def psnr(R, I) -> float:
    R = np.asarray(R, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    err = float(np.mean((R - I) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def image_metrics(R, I) -> tuple[float, float]:
    R = np.asarray(R, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    if R.shape != I.shape:
        raise ValueError(f"shape mismatch: {R.shape} vs {I.shape}")
    return psnr(R, I), objective.ssim(R, I)


def _rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def random_code(rng: np.random.Generator, m: int | None = None) -> FractalCode:
    if m is None:
        m = int(rng.integers(3, 11))
    U = _rotation(rng.uniform(0.0, 2 * np.pi, m))
    V = _rotation(rng.uniform(0.0, 2 * np.pi, m))
    sigma = rng.uniform(0.3, 0.8, (m, 2))
    b = np.clip(rng.uniform(-1.0, 1.0, (m, 2)), -0.999, 0.999)
    return code_from_factors(U, V, sigma, b)


def foreground_fraction(img) -> float:
    return float(np.mean(binarize(img)))


def gen_random_suite(n: int, seed: int, size: int = 256, point_budget: int = 1_000_000,
                     coverage=(0.01, 0.90)) -> list[FractalCode]:
    """Random contractive codes whose full-view render covers a sane fraction of the canvas."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    suite = []
    while len(suite) < n:
        for _ in range(MAX_REJECTIONS):
            code = random_code(rng)
            frac = foreground_fraction(render_eval(code, size=size, point_budget=point_budget).image)
            if coverage[0] <= frac <= coverage[1]:
                suite.append(code)
                break
            logger.debug("rejected suite candidate with coverage %.4f", frac)
        else:
            raise SuiteGenerationError(f"{MAX_REJECTIONS} consecutive rejections while generating the suite")
    return suite


def sample_eval_views(code: FractalCode, seed: int, n_patches: int = 6, zoom_range=(2.0, 8.0),
                      probe_size: int = 64, probe_budget: int = 200_000, max_tries: int = 1000) -> list[ViewWindow]:
    """The full view followed by ``n_patches`` zoomed windows that contain structure.

    Centres are drawn uniformly among foreground pixels of a full-view probe;
    each window is then kept only if its own probe render is non-empty.
    """
    rng = np.random.default_rng(seed)
    full = render_eval(code, size=probe_size, point_budget=probe_budget, supersample=1, seed=seed).image
    ys, xs = np.nonzero(full > 0)
    if ys.size == 0:
        raise ValueError("code renders an empty full view")
    views = [FULL_VIEW]
    tries = 0
    while len(views) < n_patches + 1:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not find non-empty zoom windows")
        k = rng.integers(ys.size)
        centre = ((xs[k] + rng.random()) / probe_size, (ys[k] + rng.random()) / probe_size)
        zoom = rng.uniform(*zoom_range)
        view = ViewWindow(centre, 0.5 / zoom)
        probe = render_eval(code, view, size=probe_size, point_budget=probe_budget, supersample=1, seed=seed,
                            time_cap=10.0, empty_chunks=4).image
        if np.any(probe > 0):
            views.append(view)
    return views


@dataclass(frozen=True)
class ViewMetrics:
    fractal: int
    view: int
    zoom: float
    f1: float
    iou: float
    psnr: float
    ssim: float
    under_budget_gt: bool
    under_budget_rec: bool


REPORT_COLUMNS = ("fractal", "view", "zoom", "f1", "iou", "psnr", "ssim", "lpips", "under_budget_gt",
                  "under_budget_rec")


@dataclass
class MetricReport:
    rows: list[ViewMetrics]

    def means(self) -> dict[str, float]:
        if not self.rows:
            return {k: float("nan") for k in ("f1", "iou", "psnr", "ssim")}
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in ("f1", "iou", "psnr", "ssim")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                d = asdict(r)
                w.writerow([d["fractal"], d["view"], repr(d["zoom"]), repr(d["f1"]), repr(d["iou"]),
                            repr(d["psnr"]), repr(d["ssim"]), "", int(d["under_budget_gt"]),
                            int(d["under_budget_rec"])])
            m = self.means()
            w.writerow(["mean", "", "", repr(m["f1"]), repr(m["iou"]), repr(m["psnr"]), repr(m["ssim"]), "", "", ""])


def evaluate_suite(gt_codes, recovered_codes, size: int = 256, point_budget: int = 5_000_000,
                   time_cap: float = 60.0, supersample: int = 8, seed: int = 0,
                   views_per_code=None) -> MetricReport:
    """Render each pair over its sampled views and score them.

    Both renders of a view share the generation seed, so identical codes score
    perfectly; views are sampled from the ground-truth code.
    """
    if len(gt_codes) != len(recovered_codes):
        raise ValueError("ground-truth and recovered lists differ in length")
    rows = []
    for i, (gt, rec) in enumerate(zip(gt_codes, recovered_codes)):
        views = views_per_code[i] if views_per_code is not None else sample_eval_views(gt, seed + i)
        for j, view in enumerate(views):
            kw = dict(view=view, point_budget=point_budget, time_cap=time_cap, supersample=supersample, size=size,
                      seed=seed)
            g = render_eval(gt, **kw)
            r = render_eval(rec, **kw) if rec is not None else None
            rec_img = r.image if r is not None else np.zeros_like(g.image)
            f1, iou = shape_metrics(rec_img, g.image)
            p, s = image_metrics(rec_img, g.image)
            rows.append(ViewMetrics(i, j, view.zoom, f1, iou, p, s, g.under_budget,
                                    r.under_budget if r is not None else False))
            logger.info("fractal %d view %d: F1 %.3f IoU %.3f PSNR %.2f", i, j, f1, iou, p)
    return MetricReport(rows)
