"""Differentiable Gaussian point splatting and the fast evaluation renderer.

Coordinates: a point ``(x, y)`` in normalised canvas units maps to the
supersampled pixel position ``((x - left) * k, (y - top) * k)`` with
``k = ss_size / (2 * half_extent)``. Pixel ``(row, col)`` has its centre at
``(col + 0.5, row + 0.5)``. Rows grow with ``y``.

Coverage of a pixel is ``1 - prod_j (1 - alpha_j)`` over the splats within the
cutoff radius ``R = c * sigma``. Each splat is a Gaussian minus its tangent (in
``d^2``) at the cutoff, rescaled so the peak stays ``alpha_peak``::

    g(d^2) = exp(-d^2 / (2 sigma^2)),  e_c = g(R^2)
    alpha_j ~ g(d_j^2) - e_c + e_c * (d_j^2 - R^2) / (2 sigma^2)

Value and slope both vanish at the cutoff, so truncation adds no kink and the
gradient is continuous in the point positions.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import chaos_gen
from .errors import GeometryMismatchError
from .ifs_core import FractalCode, determinant_probabilities, svd_factors

logger = logging.getLogger(__name__)

TILE = 16


@dataclass(frozen=True)
class SplatConfig:
    sigma_px: float = 2.5
    alpha_peak: float = 0.25
    cutoff: float = 3.0

    def __post_init__(self):
        if not self.sigma_px > 0:
            raise ValueError("sigma_px must be positive")
        if not 0 < self.alpha_peak <= 1:
            raise ValueError("alpha_peak must lie in (0, 1]")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")

    @property
    def radius(self) -> float:
        return self.cutoff * self.sigma_px

    def kernel_constants(self) -> tuple[float, float, float]:
        """``(scale, slope, shift)`` with ``alpha = scale * gaussian + slope * d2 - shift``."""
        e_c = math.exp(-0.5 * self.cutoff ** 2)
        scale = self.alpha_peak / (1.0 - e_c * (1.0 + 0.5 * self.cutoff ** 2))
        slope = scale * e_c / (2.0 * self.sigma_px ** 2)
        return scale, slope, scale * e_c * (1.0 + 0.5 * self.cutoff ** 2)

    def alpha(self, d2):
        """Per-splat opacity at squared pixel distance ``d2``."""
        scale, slope, shift = self.kernel_constants()
        d2 = np.asarray(d2, dtype=np.float64)
        a = scale * np.exp(-0.5 * d2 / self.sigma_px ** 2) + slope * d2 - shift
        return np.where(d2 <= self.radius ** 2, np.maximum(a, 0.0), 0.0)


@dataclass(frozen=True)
class ViewWindow:
    center: tuple[float, float] = (0.5, 0.5)
    half_extent: float = 0.5

    def __post_init__(self):
        if not self.half_extent > 0:
            raise ValueError("half_extent must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "half_extent", float(self.half_extent))

    @property
    def zoom(self) -> float:
        return 0.5 / self.half_extent

    @property
    def left(self) -> float:
        return self.center[0] - self.half_extent

    @property
    def top(self) -> float:
        return self.center[1] - self.half_extent

    @classmethod
    def zoomed(cls, center, factor: float) -> "ViewWindow":
        return cls(center=tuple(center), half_extent=0.5 / factor)


FULL_VIEW = ViewWindow()


@dataclass(frozen=True)
class Geometry:
    size: int
    supersample: int
    view: ViewWindow
    cfg: SplatConfig

    @property
    def ss_size(self) -> int:
        return self.size * self.supersample

    @property
    def px_per_unit(self) -> float:
        return self.ss_size / (2.0 * self.view.half_extent)

    def to_pixels(self, points) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        k = self.px_per_unit
        return ((pts[:, 0] - self.view.left) * k, (pts[:, 1] - self.view.top) * k)


@dataclass
class SplatResult:
    """Supersampled coverage plus what the backward pass needs to match it."""

    coverage: np.ndarray
    geometry: Geometry
    n_points: int
    skipped: int

    @property
    def image(self) -> np.ndarray:
        return downsample(self.coverage, self.geometry.supersample)


@njit(cache=True)
def _pixel_span(c, radius, n):
    lo = int(math.ceil(c - radius - 0.5))
    hi = int(math.floor(c + radius - 0.5))
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@njit(cache=True)
def _bin_points(px, py, valid, radius, W, H, ntx, nty):
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    N = px.shape[0]
    for n in range(N):
        if not valid[n]:
            continue
        x0, x1 = _pixel_span(px[n], radius, W)
        y0, y1 = _pixel_span(py[n], radius, H)
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    items = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for n in range(N):
        if not valid[n]:
            continue
        x0, x1 = _pixel_span(px[n], radius, W)
        y0, y1 = _pixel_span(py[n], radius, H)
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                t = ty * ntx + tx
                items[fill[t]] = n
                fill[t] += 1
    return offsets, items


@njit(parallel=True, cache=True)
def _splat_tiles(px, py, offsets, items, ntx, nty, W, H, radius, r2max, inv2s2, a_scale, a_slope, a_shift, out):
    for tid in prange(ntx * nty):
        ty = tid // ntx
        tx = tid - ty * ntx
        bx = tx * TILE
        by = ty * TILE
        ex = min(bx + TILE, W)
        ey = min(by + TILE, H)
        trans = np.ones((TILE, TILE))
        ecol = np.empty(TILE)
        for j in range(offsets[tid], offsets[tid + 1]):
            n = items[j]
            cx = px[n]
            cy = py[n]
            x0, x1 = _pixel_span(cx, radius, W)
            y0, y1 = _pixel_span(cy, radius, H)
            x0 = max(x0, bx)
            y0 = max(y0, by)
            x1 = min(x1, ex - 1)
            y1 = min(y1, ey - 1)
            for ix in range(x0, x1 + 1):
                dx = ix + 0.5 - cx
                ecol[ix - x0] = math.exp(-dx * dx * inv2s2)
            for iy in range(y0, y1 + 1):
                dy = iy + 0.5 - cy
                arow = a_scale * math.exp(-dy * dy * inv2s2)
                for ix in range(x0, x1 + 1):
                    dx = ix + 0.5 - cx
                    d2 = dx * dx + dy * dy
                    if d2 <= r2max:
                        al = arow * ecol[ix - x0] + a_slope * d2 - a_shift
                        if al > 0.0:
                            trans[iy - by, ix - bx] *= 1.0 - al
        for iy in range(by, ey):
            for ix in range(bx, ex):
                out[iy, ix] = 1.0 - trans[iy - by, ix - bx]


@njit(parallel=True, cache=True)
def _splat_grad(px, py, valid, G, C, W, H, radius, r2max, inv2s2, inv_s2, a_scale, a_slope, a_shift, grad):
    N = px.shape[0]
    for n in prange(N):
        if not valid[n]:
            continue
        cx = px[n]
        cy = py[n]
        x0, x1 = _pixel_span(cx, radius, W)
        y0, y1 = _pixel_span(cy, radius, H)
        gx = 0.0
        gy = 0.0
        ecol = np.empty(x1 - x0 + 1)
        for ix in range(x0, x1 + 1):
            dx = ix + 0.5 - cx
            ecol[ix - x0] = math.exp(-dx * dx * inv2s2)
        for iy in range(y0, y1 + 1):
            dy = iy + 0.5 - cy
            arow = a_scale * math.exp(-dy * dy * inv2s2)
            for ix in range(x0, x1 + 1):
                dx = ix + 0.5 - cx
                d2 = dx * dx + dy * dy
                if d2 <= r2max:
                    gauss = arow * ecol[ix - x0]
                    al = gauss + a_slope * d2 - a_shift
                    if al <= 0.0:
                        continue
                    rest = 1.0 - al
                    if rest < 1e-12:
                        continue
                    # dC/dalpha_j = prod_{k != j} (1 - alpha_k) = (1 - C) / (1 - alpha_j)
                    da = G[iy, ix] * (1.0 - C[iy, ix]) / rest * (gauss * inv_s2 - 2.0 * a_slope)
                    gx += da * dx
                    gy += da * dy
        grad[n, 0] = gx
        grad[n, 1] = gy


def _valid_mask(px, py, geom: Geometry):
    finite = np.isfinite(px) & np.isfinite(py)
    r = geom.cfg.radius
    n = geom.ss_size
    with np.errstate(invalid="ignore"):
        inside = (px > -r - 1) & (px < n + r + 1) & (py > -r - 1) & (py < n + r + 1)
    return finite & inside, int(np.count_nonzero(~finite))


def splat_forward(points, cfg: SplatConfig = SplatConfig(), size: int = 64,
                  view: ViewWindow = FULL_VIEW, supersample: int = 1) -> SplatResult:
    """Splat ``points`` as Gaussians onto a ``(size*ss, size*ss)`` canvas."""
    if size < 1 or supersample < 1:
        raise ValueError("size and supersample must be positive")
    geom = Geometry(int(size), int(supersample), view, cfg)
    px, py = geom.to_pixels(points)
    valid, skipped = _valid_mask(px, py, geom)
    if skipped:
        logger.debug("skipped %d non-finite points", skipped)
    n = geom.ss_size
    ntiles = (n + TILE - 1) // TILE
    px = np.where(valid, px, 0.0)
    py = np.where(valid, py, 0.0)
    offsets, items = _bin_points(px, py, valid, cfg.radius, n, n, ntiles, ntiles)
    out = np.empty((n, n))
    a_scale, a_slope, a_shift = cfg.kernel_constants()
    _splat_tiles(px, py, offsets, items, ntiles, ntiles, n, n, cfg.radius, cfg.radius ** 2,
                 0.5 / cfg.sigma_px ** 2, a_scale, a_slope, a_shift, out)
    return SplatResult(coverage=out, geometry=geom, n_points=len(px), skipped=skipped)


def splat_backward(points, cfg: SplatConfig, view: ViewWindow, grad_image, forward: SplatResult) -> np.ndarray:
    """Gradient w.r.t. point positions of ``L(downsample(splat_forward(points)))``.

    Args:
        points: the ``(N, 2)`` positions given to the forward call.
        grad_image: ``dL/dimage`` at target resolution.
        forward: the :class:`SplatResult` of the matching forward call.
    """
    geom = forward.geometry
    grad_image = np.asarray(grad_image, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if geom.cfg != cfg or geom.view != view:
        raise GeometryMismatchError("splat config or view differs from the forward pass")
    if grad_image.shape != (geom.size, geom.size):
        raise GeometryMismatchError(f"gradient shape {grad_image.shape} != image shape {(geom.size, geom.size)}")
    if len(pts) != forward.n_points:
        raise GeometryMismatchError("point count differs from the forward pass")
    ss = geom.supersample
    G = np.repeat(np.repeat(grad_image, ss, axis=0), ss, axis=1) / (ss * ss)
    px, py = geom.to_pixels(pts)
    valid, _ = _valid_mask(px, py, geom)
    px = np.where(valid, px, 0.0)
    py = np.where(valid, py, 0.0)
    grad = np.zeros((len(pts), 2))
    n = geom.ss_size
    a_scale, a_slope, a_shift = cfg.kernel_constants()
    _splat_grad(px, py, valid, G, forward.coverage, n, n, cfg.radius, cfg.radius ** 2,
                0.5 / cfg.sigma_px ** 2, 1.0 / cfg.sigma_px ** 2, a_scale, a_slope, a_shift, grad)
    return grad * geom.px_per_unit


def downsample(c, factor: int) -> np.ndarray:
    """Mean over non-overlapping ``factor x factor`` blocks."""
    c = np.asarray(c, dtype=np.float64)
    h, w = c.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image shape {c.shape}")
    if factor == 1:
        return c.copy()
    return c.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def render_points(points, cfg: SplatConfig = SplatConfig(), size: int = 64,
                  view: ViewWindow = FULL_VIEW, supersample: int = 1) -> np.ndarray:
    return splat_forward(points, cfg, size, view, supersample).image


# -- evaluation renderer ----------------------------------------------------

@dataclass
class EvalRender:
    image: np.ndarray
    under_budget: bool
    in_view: int
    generated: int
    elapsed: float


def attractor_transform(code: FractalCode, seed: int = 0) -> chaos_gen.NormalizationTransform:
    """Normalisation fitted on a 1M-point determinant-mode probe of the attractor."""
    _, _, _, M, b = svd_factors(code.params)
    tape = chaos_gen.run_chaos_game((M, b), determinant_probabilities(M), 1024, 1024, 32,
                                    seed=chaos_gen._mix64_py(int(seed) + 0x5EED), check_contractive=False)
    transform, _ = chaos_gen.fit_normalization(tape.emitted_flat())
    return transform


def render_eval(code: FractalCode, view: ViewWindow = FULL_VIEW, point_budget: int = 5_000_000,
                time_cap: float = 60.0, supersample: int = 8, size: int = 256, seed: int = 0,
                transform: chaos_gen.NormalizationTransform | None = None,
                empty_chunks: int = 16) -> EvalRender:
    """Non-differentiable render: one-subpixel box footprints, averaged down.

    Generation proceeds in fixed chunks until ``point_budget`` points have landed
    in the view or ``time_cap`` seconds have passed. If ``empty_chunks`` chunks in
    a row land nothing, the view is declared empty.
    """
    t0 = time.monotonic()
    _, _, _, M, b = svd_factors(code.params)
    if transform is None:
        transform = attractor_transform(code, seed)
    cdf = np.cumsum(determinant_probabilities(M))
    cdf[-1] = np.inf
    n = size * supersample
    hits = np.zeros((n, n), dtype=np.uint8)
    inv_pix = n / (2.0 * view.half_extent)
    in_view = generated = chunk = 0
    while in_view < point_budget:
        if time.monotonic() - t0 > time_cap:
            break
        if chunk >= empty_chunks and in_view == 0:
            break
        in_view += chaos_gen.hit_chunk(M, b, cdf, chaos_gen.chunk_key(seed, chunk), transform,
                                       view.left, view.top, inv_pix, hits)
        generated += chaos_gen.CHUNK_POINTS
        chunk += 1
    image = downsample(hits.astype(np.float64), supersample)
    return EvalRender(image=image, under_budget=in_view < point_budget, in_view=in_view,
                      generated=generated, elapsed=time.monotonic() - t0)
