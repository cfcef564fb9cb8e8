"""Hand-written reverse mode through the chaos game and the SVD parameterisation."""

from __future__ import annotations

from typing import Callable

import numpy as np
from numba import njit, prange

from .chaos_gen import TrajectoryTape, _as_arrays, check_replay
from .errors import ReplayMismatchError
from .ifs_core import B_SLICE, PARAMS_PER_MAP, S_SLICE, U_SLICE, V_SLICE, FractalCode, svd_factors


@njit(parallel=True, cache=True)
def _trajectory_adjoints(M, starts, points, indices, gpts, w, truncate, dM, db):
    B, L = indices.shape
    for t in prange(B):
        ax = 0.0
        ay = 0.0
        for k in range(L - 1, -1, -1):
            if k >= w:
                ax += gpts[t, k - w, 0]
                ay += gpts[t, k - w, 1]
            elif truncate:
                break
            i = indices[t, k]
            if k == 0:
                px = starts[t, 0]
                py = starts[t, 1]
            else:
                px = points[t, k - 1, 0]
                py = points[t, k - 1, 1]
            dM[t, i, 0, 0] += ax * px
            dM[t, i, 0, 1] += ax * py
            dM[t, i, 1, 0] += ay * px
            dM[t, i, 1, 1] += ay * py
            db[t, i, 0] += ax
            db[t, i, 1] += ay
            nax = M[i, 0, 0] * ax + M[i, 1, 0] * ay
            nay = M[i, 0, 1] * ax + M[i, 1, 1] * ay
            ax = nax
            ay = nay


def backprop_trajectories(tape: TrajectoryTape, maps, grad_points, truncate_warmup: bool = False,
                          validate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate ``dL/dM`` and ``dL/db`` per map from gradients on emitted points.

    Args:
        tape: the tape the points came from.
        maps: list of maps or stacked ``(M, b)`` used to generate the tape.
        grad_points: ``dL/dx`` for the emitted points, shape ``(B, L - w, 2)`` or
            flattened ``(B * (L - w), 2)``.
        truncate_warmup: drop parameter contributions from warm-up steps.
        validate: replay the tape first and raise on mismatch.

    Returns:
        ``(dM, db)`` of shapes ``(m, 2, 2)`` and ``(m, 2)``.
    """
    M, b = _as_arrays(maps)
    g = np.asarray(grad_points, dtype=np.float64)
    if g.size != tape.n_emitted * 2:
        raise ReplayMismatchError(f"expected gradients for {tape.n_emitted} emitted points, got {g.size // 2}")
    g = np.ascontiguousarray(g.reshape(tape.B, tape.L - tape.w, 2))
    if validate:
        check_replay(tape, (M, b))
    m = M.shape[0]
    dM = np.zeros((tape.B, m, 2, 2))
    db = np.zeros((tape.B, m, 2))
    _trajectory_adjoints(M, tape.starts, tape.points, tape.indices, g, tape.w, truncate_warmup, dM, db)
    # fixed-order reduction keeps results independent of the thread count
    return dM.sum(axis=0), db.sum(axis=0)


def backprop_parameterization(code: FractalCode, dM, db, dsigma=None) -> np.ndarray:
    """Chain ``dL/dM``, ``dL/db`` (and optional direct ``dL/dsigma``) back to raw parameters.

    ``U`` and ``V`` receive the gradient of their unconstrained entries; the
    orthonormal projection is applied after the update and is not differentiated.
    """
    U, V, sigma, _, b = svd_factors(code.params)
    G = np.asarray(dM, dtype=np.float64).reshape(-1, 2, 2)
    gb = np.asarray(db, dtype=np.float64).reshape(-1, 2)
    dU = np.einsum("mij,mjk,mk->mik", G, V, sigma)
    dV = np.einsum("mji,mjk,mk->mik", G, U, sigma)
    dsig = np.einsum("maj,mab,mbj->mj", U, G, V)
    if dsigma is not None:
        dsig = dsig + np.asarray(dsigma, dtype=np.float64).reshape(-1, 2)
    out = np.empty((code.m, PARAMS_PER_MAP))
    out[:, U_SLICE] = dU.reshape(-1, 4)
    out[:, V_SLICE] = dV.reshape(-1, 4)
    out[:, S_SLICE] = dsig * sigma * (1.0 - sigma)
    out[:, B_SLICE] = gb * (1.0 - b * b)
    return out


def finite_difference_gradient(theta, loss_fn: Callable[[np.ndarray], float], h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` at ``theta``, one coordinate at a time.

    ``loss_fn`` must be deterministic: pin every random seed it uses.
    """
    theta = np.asarray(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        grad[i] = (loss_fn((flat + e).reshape(theta.shape)) - loss_fn((flat - e).reshape(theta.shape))) / (2 * h)
    return grad.reshape(theta.shape)


def relative_errors(analytic, numeric, floor: float | None = None) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` defaults to ``1e-6 * max|n|`` so coordinates with vanishing
    gradient do not dominate.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if floor is None:
        floor = 1e-6 * max(float(np.max(np.abs(n))), 1e-300)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
