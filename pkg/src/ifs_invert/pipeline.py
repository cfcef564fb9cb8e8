"""The differentiable forward model and its full reverse pass.

``theta -> maps -> chaos game -> normalise -> splat -> downsample -> loss``

The normalisation transform is held constant in the reverse pass. Pass a fixed
``transform`` to :func:`evaluate` to make the forward pass agree with that
convention (finite-difference checks do this).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import chaos_gen, grad_engine, objective
from .chaos_gen import NormalizationTransform
from .ifs_core import (FractalCode, PARAMS_PER_MAP, code_from_factors, init_params, project_code,
                       svd_factors)
from .objective import LossBreakdown, LossWeights
from .splat_render import FULL_VIEW, SplatConfig, splat_backward, splat_forward


class SvdParameterization:
    """Twelve raw scalars per map: orthonormal U, V entries, sigmoid singular values, tanh offsets."""

    name = "svd"
    per_map = PARAMS_PER_MAP
    contractive = True

    def init(self, m: int, seed: int) -> np.ndarray:
        return init_params(m, seed).params.copy()

    def materialize(self, theta):
        _, _, sigma, M, b = svd_factors(theta)
        # debug-only guard; sigmoid keeps this true by construction
        assert np.all(sigma < 1.0), "non-contractive map from the SVD parameterisation"
        return M, b, sigma

    def project(self, theta, seed: int = 0) -> np.ndarray:
        return project_code(theta, seed=seed)

    def backprop(self, theta, dM, db, dsigma) -> np.ndarray:
        return grad_engine.backprop_parameterization(FractalCode(theta), dM, db, dsigma)

    def to_code(self, theta) -> FractalCode:
        return FractalCode(theta)

    def from_code(self, code: FractalCode) -> np.ndarray:
        return code.params.copy()


class NaiveParameterization:
    """Six raw scalars per map: the matrix entries (row-major) and the offset, unconstrained."""

    name = "naive"
    per_map = 6
    contractive = False

    def init(self, m: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.empty((m, 6))
        theta[:, :4] = rng.uniform(-0.5, 0.5, size=(m, 4))
        theta[:, 4:] = rng.uniform(-1.0, 1.0, size=(m, 2))
        return theta

    def materialize(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        M = theta[:, :4].reshape(-1, 2, 2).copy()
        b = theta[:, 4:].copy()
        sigma = np.linalg.svd(M, compute_uv=False)
        return M, b, sigma

    def project(self, theta, seed: int = 0) -> np.ndarray:
        return np.array(theta, dtype=np.float64, copy=True)

    def backprop(self, theta, dM, db, dsigma) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        M = theta[:, :4].reshape(-1, 2, 2)
        u, _, vt = np.linalg.svd(M)
        # d sigma_j / dM = u_j v_j^T
        dM = dM + np.einsum("mj,maj,mjb->mab", dsigma, u, vt)
        return np.concatenate([dM.reshape(-1, 4), db], axis=1)

    def to_code(self, theta) -> FractalCode:
        """Nearest SVD-form code; singular values and offsets are clipped into range."""
        theta = np.asarray(theta, dtype=np.float64)
        M = theta[:, :4].reshape(-1, 2, 2)
        u, s, vt = np.linalg.svd(M)
        s = np.clip(s, 1e-9, 1.0 - 1e-9)
        b = np.clip(theta[:, 4:], -1.0 + 1e-9, 1.0 - 1e-9)
        return code_from_factors(u, np.transpose(vt, (0, 2, 1)), s, b)

    def from_code(self, code: FractalCode) -> np.ndarray:
        _, _, _, M, b = svd_factors(code.params)
        return np.concatenate([M.reshape(-1, 4), b], axis=1)


PARAMETERIZATIONS = {"svd": SvdParameterization, "naive": NaiveParameterization}


@dataclass(frozen=True)
class PipelineSettings:
    B: int = 2000
    L: int = 250
    w: int = 10
    size: int = 1024
    supersample: int = 5
    splat: SplatConfig = field(default_factory=SplatConfig)
    truncate_warmup: bool = False
    normalization_grad: bool = True


@dataclass
class ForwardPass:
    image: np.ndarray
    tape: chaos_gen.TrajectoryTape
    positions: np.ndarray
    transform: NormalizationTransform
    splat: object
    M: np.ndarray
    b: np.ndarray
    sigma: np.ndarray


def forward(theta, param, settings: PipelineSettings, seed: int,
            transform: NormalizationTransform | None = None) -> ForwardPass:
    M, b, sigma = param.materialize(theta)
    p = np.full(M.shape[0], 1.0 / M.shape[0])
    tape = chaos_gen.run_chaos_game((M, b), p, settings.B, settings.L, settings.w, seed,
                                    check_contractive=param.contractive)
    raw = tape.emitted_flat()
    if transform is None:
        transform, _ = chaos_gen.fit_normalization(raw)
    positions = transform.apply(raw)
    res = splat_forward(positions, settings.splat, settings.size, FULL_VIEW, settings.supersample)
    return ForwardPass(res.image, tape, positions, transform, res, M, b, sigma)


def render(theta, param, settings: PipelineSettings, seed: int) -> np.ndarray:
    return forward(theta, param, settings, seed).image


def evaluate(theta, target, param, settings: PipelineSettings, weights: LossWeights, seed: int,
             objective_name: str = "full", mip: bool = True, perceptual=None, with_grad: bool = True,
             transform: NormalizationTransform | None = None):
    """Loss (and optionally its gradient w.r.t. ``theta``) for one generation seed.

    Returns:
        ``(LossBreakdown, grad or None, ForwardPass)``.
    """
    frozen = transform is not None
    fp = forward(theta, param, settings, seed, transform)
    if objective_name == "moments":
        value, d_img = objective.moment_loss(fp.image, target)
        breakdown = LossBreakdown(total=value, mse_ms=0.0, dssim=0.0, perceptual=0.0, reg=0.0)
        dsig = np.zeros_like(fp.sigma)
        db_reg = np.zeros_like(fp.b)
    elif objective_name == "full":
        breakdown, d_img, dsig, db_reg = objective.total_loss(fp.image, target, (fp.sigma, fp.b), weights,
                                                              perceptual=perceptual, mip=mip)
    else:
        raise ValueError(f"unknown objective {objective_name!r}")
    if not with_grad:
        return breakdown, None, fp
    g_pos = splat_backward(fp.positions, settings.splat, FULL_VIEW, d_img, fp.splat)
    g_raw = chaos_gen.normalization_backward(fp.tape.emitted_flat(), fp.transform, g_pos,
                                             through_transform=settings.normalization_grad and not frozen)
    dM, db = grad_engine.backprop_trajectories(fp.tape, (fp.M, fp.b), g_raw,
                                               truncate_warmup=settings.truncate_warmup, validate=False)
    grad = param.backprop(theta, dM, db + db_reg, dsig)
    return breakdown, grad, fp


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    elapsed: float

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(self.rel_error <= self.tol))


def gradient_check(m: int = 3, B: int = 8, L: int = 20, w: int = 4, size: int = 64, supersample: int = 2,
                   seed: int = 0, h: float = 1e-6, tol: float = 1e-2, weights: LossWeights = LossWeights(),
                   normalization_grad: bool = True) -> GradCheckResult:
    """Analytic pipeline gradient against central differences at pinned seeds.

    The target is a rendering of an unrelated random code. With
    ``normalization_grad=False`` the centring transform is frozen at the base
    point for the finite differences too, so both sides see the same function.
    """
    t0 = time.monotonic()
    param = SvdParameterization()
    settings = PipelineSettings(B=B, L=L, w=w, size=size, supersample=supersample,
                                normalization_grad=normalization_grad)
    theta = param.init(m, seed)
    target = render(param.init(m, seed + 1), param, settings, seed + 1)
    _, grad, fp = evaluate(theta, target, param, settings, weights, seed)
    frozen = None if normalization_grad else fp.transform

    def loss(th):
        return evaluate(th, target, param, settings, weights, seed, with_grad=False, transform=frozen)[0].total

    numeric = grad_engine.finite_difference_gradient(theta, loss, h)
    rel = grad_engine.relative_errors(grad, numeric)
    return GradCheckResult(grad, numeric, rel, tol, time.monotonic() - t0)
