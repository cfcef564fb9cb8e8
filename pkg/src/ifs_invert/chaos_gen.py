"""Parallel chaos game with warm-up, trajectory tapes and point-cloud normalisation.

Random numbers come from a counter-based generator: every draw is a hash of
``(seed, stream, trajectory, step)``, so results do not depend on the number of
worker threads or on the order in which trajectories are processed.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from numba import njit, prange

from .errors import ContractViolationError, ReplayMismatchError
from .ifs_core import stack_maps

logger = logging.getLogger(__name__)

STREAM_INIT = 1
STREAM_SELECT = 2

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 1.0 / 9007199254740992.0  # 2**-53


@njit(inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(inline="always")
def _uniform(key, stream, traj, step):
    h = _mix64(key + _GOLDEN * np.uint64(stream + 1))
    h = _mix64(h + _GOLDEN * np.uint64(traj + 1))
    h = _mix64(h + _GOLDEN * np.uint64(step + 1))
    return np.float64(h >> np.uint64(11)) * _TO_UNIT


@njit(cache=True)
def counter_uniform(key, stream, traj, step):
    """Uniform [0, 1) draw for one ``(stream, trajectory, step)`` counter."""
    return _uniform(np.uint64(key), stream, traj, step)


def seed_key(seed) -> np.uint64:
    """Hash an arbitrary non-negative integer seed into a 64-bit stream key."""
    return np.uint64(int(_mix64_py(int(seed) % (1 << 64))))


def _mix64_py(z: int) -> int:
    mask = (1 << 64) - 1
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


@njit(inline="always")
def _select(cdf, r):
    i = 0
    m = cdf.shape[0]
    while i < m - 1 and r >= cdf[i]:
        i += 1
    return i


@njit(parallel=True, cache=True)
def _chaos_kernel(M, b, cdf, L, key, starts, points, indices):
    B = starts.shape[0]
    for t in prange(B):
        x = 2.0 * _uniform(key, STREAM_INIT, t, 0) - 1.0
        y = 2.0 * _uniform(key, STREAM_INIT, t, 1) - 1.0
        starts[t, 0] = x
        starts[t, 1] = y
        for k in range(L):
            i = _select(cdf, _uniform(key, STREAM_SELECT, t, k))
            nx = M[i, 0, 0] * x + M[i, 0, 1] * y + b[i, 0]
            ny = M[i, 1, 0] * x + M[i, 1, 1] * y + b[i, 1]
            x = nx
            y = ny
            points[t, k, 0] = x
            points[t, k, 1] = y
            indices[t, k] = i


@njit(parallel=True, cache=True)
def _replay_kernel(M, b, starts, indices, out):
    B, L = indices.shape
    for t in prange(B):
        x = starts[t, 0]
        y = starts[t, 1]
        for k in range(L):
            i = indices[t, k]
            nx = M[i, 0, 0] * x + M[i, 0, 1] * y + b[i, 0]
            ny = M[i, 1, 0] * x + M[i, 1, 1] * y + b[i, 1]
            x = nx
            y = ny
            out[t, k, 0] = x
            out[t, k, 1] = y


@dataclass(frozen=True)
class TrajectoryTape:
    """Record of one batch of chaos-game trajectories.

    ``points[t, k]`` is the point produced by applying map ``indices[t, k]`` to
    the previous point (``starts[t]`` for ``k == 0``). The first ``w`` points of
    each row are warm-up and are not emitted.
    """

    starts: np.ndarray
    points: np.ndarray
    indices: np.ndarray
    B: int
    L: int
    w: int
    seed: int

    @property
    def emitted(self) -> np.ndarray:
        return self.points[:, self.w:, :]

    @property
    def n_emitted(self) -> int:
        return self.B * (self.L - self.w)

    def emitted_flat(self) -> np.ndarray:
        """Emitted points as ``(B * (L - w), 2)``, trajectory-major."""
        return np.ascontiguousarray(self.emitted).reshape(-1, 2)


def _as_arrays(maps):
    if isinstance(maps, tuple) and len(maps) == 2 and isinstance(maps[0], np.ndarray):
        M, b = maps
        return np.ascontiguousarray(M, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64)
    return stack_maps(maps)


def _cdf(p, m):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (m,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError("p must be a probability vector with one entry per map")
    cdf = np.cumsum(p)
    cdf[-1] = np.inf
    return cdf


def max_singular_values(M) -> np.ndarray:
    return np.linalg.svd(np.asarray(M), compute_uv=False)[:, 0]


def run_chaos_game(maps, p, B: int, L: int, w: int, seed, check_contractive: bool = True) -> TrajectoryTape:
    """Run ``B`` independent trajectories of ``L`` steps each.

    Args:
        maps: list of :class:`MaterializedMap` or a stacked ``(M, b)`` pair.
        p: sampling probability per map.
        B, L, w: trajectory count, length and warm-up length (``w < L``).
        seed: non-negative integer; the whole tape is a pure function of it.
        check_contractive: reject maps with a singular value ``>= 1``.
    """
    M, b = _as_arrays(maps)
    m = M.shape[0]
    if B < 1 or L < 1 or not 0 <= w < L:
        raise ValueError(f"need B >= 1 and 0 <= w < L, got B={B}, L={L}, w={w}")
    if check_contractive and np.any(max_singular_values(M) >= 1.0):
        raise ContractViolationError("map with singular value >= 1 passed to the chaos game")
    cdf = _cdf(p, m)
    starts = np.empty((B, 2))
    points = np.empty((B, L, 2))
    indices = np.empty((B, L), dtype=np.int32)
    _chaos_kernel(M, b, cdf, L, seed_key(seed), starts, points, indices)
    return TrajectoryTape(starts=starts, points=points, indices=indices, B=B, L=L, w=w, seed=int(seed))


def replay(tape: TrajectoryTape, maps) -> np.ndarray:
    """Recompute the tape's points from its start points and map indices."""
    M, b = _as_arrays(maps)
    if tape.indices.size and (tape.indices.max() >= M.shape[0] or tape.indices.min() < 0):
        raise ReplayMismatchError("tape references a map index outside the code")
    out = np.empty_like(tape.points)
    _replay_kernel(M, b, tape.starts, tape.indices, out)
    return out


def check_replay(tape: TrajectoryTape, maps) -> None:
    if not np.array_equal(replay(tape, maps), tape.points):
        raise ReplayMismatchError("tape points do not replay under the given maps")


@dataclass(frozen=True)
class NormalizationTransform:
    """``x -> scale * x + offset``."""

    scale: float
    offset: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) + self.offset


@dataclass(frozen=True)
class PointSet:
    """Normalised points; row ``n`` came from tape row ``n // (L - w)``, step ``w + n % (L - w)``."""

    positions: np.ndarray
    transform: NormalizationTransform
    degenerate: bool = False


def fit_normalization(points) -> tuple[NormalizationTransform, bool]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    finite = pts[np.all(np.isfinite(pts), axis=1)]
    if len(finite) == 0:
        return NormalizationTransform(1.0, np.array([0.5, 0.5])), True
    lo = finite.min(axis=0)
    hi = finite.max(axis=0)
    center = 0.5 * (lo + hi)
    side = float(np.max(hi - lo))
    if not side > 0.0:
        logger.warning("degenerate point cloud: all points coincide")
        return NormalizationTransform(1.0, np.array([0.5, 0.5]) - center), True
    scale = 0.5 / side
    return NormalizationTransform(scale, np.array([0.5, 0.5]) - scale * center), False


def normalization_backward(points, transform: NormalizationTransform, grad_normalized,
                           through_transform: bool = False) -> np.ndarray:
    """Map ``dL/d(normalised point)`` back to raw points.

    With ``through_transform`` the scale and offset are differentiated too: they
    depend on the bounding-box extremes, so those few points pick up the extra
    terms (exact wherever the extremes are unique).
    """
    g = np.asarray(grad_normalized, dtype=np.float64).reshape(-1, 2)
    out = transform.scale * g
    if not through_transform:
        return out
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    s = transform.scale
    lo_i = pts.argmin(axis=0)
    hi_i = pts.argmax(axis=0)
    lo = pts[lo_i, [0, 1]]
    hi = pts[hi_i, [0, 1]]
    center = 0.5 * (lo + hi)
    extent = hi - lo
    a = int(np.argmax(extent))
    if not extent[a] > 0:
        return out
    d_scale = float(np.sum(g * (pts - center)))
    d_center = -s * g.sum(axis=0)
    for k in range(2):
        out[lo_i[k], k] += 0.5 * d_center[k]
        out[hi_i[k], k] += 0.5 * d_center[k]
    # s = 0.5 / (hi_a - lo_a)
    out[hi_i[a], a] -= d_scale * s / extent[a]
    out[lo_i[a], a] += d_scale * s / extent[a]
    return out


def normalize_points(points) -> tuple[PointSet, NormalizationTransform]:
    """Centre the bounding box at (0.5, 0.5) and scale its larger side to 0.5."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    transform, degenerate = fit_normalization(pts)
    return PointSet(transform.apply(pts), transform, degenerate), transform


# -- evaluation fast path ----------------------------------------------------

@njit(parallel=True, cache=True)
def _hit_kernel(M, b, cdf, B, L, w, key, scale, ox, oy, left, top, inv_pix, hits):
    H = hits.shape[0]
    W = hits.shape[1]
    counts = np.zeros(B, dtype=np.int64)
    for t in prange(B):
        x = 2.0 * _uniform(key, STREAM_INIT, t, 0) - 1.0
        y = 2.0 * _uniform(key, STREAM_INIT, t, 1) - 1.0
        c = 0
        for k in range(L):
            i = _select(cdf, _uniform(key, STREAM_SELECT, t, k))
            nx = M[i, 0, 0] * x + M[i, 0, 1] * y + b[i, 0]
            ny = M[i, 1, 0] * x + M[i, 1, 1] * y + b[i, 1]
            x = nx
            y = ny
            if k < w:
                continue
            px = ((scale * x + ox) - left) * inv_pix
            py = ((scale * y + oy) - top) * inv_pix
            if px >= 0.0 and py >= 0.0 and px < W and py < H:
                hits[int(py), int(px)] = 1
                c += 1
        counts[t] = c
    return counts.sum()


_N_TRAJ_EVAL = 1024
EVAL_CHUNK_LENGTH = 1024
EVAL_WARMUP = 32


def hit_chunk(M, b, cdf, key, transform: NormalizationTransform, left, top, inv_pix, hits) -> int:
    """Rasterise one chunk of ``1024 x (1024 - 32)`` emitted points as binary hits.

    Returns the number of points that landed inside ``hits``.
    """
    return int(_hit_kernel(M, b, cdf, _N_TRAJ_EVAL, EVAL_CHUNK_LENGTH, EVAL_WARMUP, np.uint64(key),
                           float(transform.scale), float(transform.offset[0]), float(transform.offset[1]),
                           float(left), float(top), float(inv_pix), hits))


CHUNK_POINTS = _N_TRAJ_EVAL * (EVAL_CHUNK_LENGTH - EVAL_WARMUP)


def chunk_key(seed, chunk: int) -> np.uint64:
    mask = (1 << 64) - 1
    return np.uint64(_mix64_py((int(seed_key(seed)) + 0x9E3779B97F4A7C15 * (chunk + 1)) & mask))


def set_threads(n: int | None) -> int:
    """Set the numba worker count; ``None`` keeps the current setting."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()


# -- debug dump ---------------------------------------------------------------

def write_point_dump(path, points) -> None:
    """Little-endian ``u64`` count followed by ``float32`` (x, y) pairs."""
    pts = np.ascontiguousarray(np.asarray(points).reshape(-1, 2), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(pts)))
        fh.write(pts.tobytes())


def read_point_dump(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError("point dump truncated before count")
    (n,) = struct.unpack("<Q", data[:8])
    if len(data) != 8 + 8 * n:
        raise ValueError(f"point dump declares {n} points but holds {(len(data) - 8) / 8:g}")
    return np.frombuffer(data[8:], dtype="<f4").reshape(n, 2).copy()
