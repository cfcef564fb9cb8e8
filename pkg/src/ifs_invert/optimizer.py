"""Hybrid optimiser: Adam gradient descent interleaved with simulated annealing."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import objective, pipeline
from .errors import DivergenceError
from .ifs_core import FractalCode
from .objective import LossBreakdown, LossWeights
from .splat_render import SplatConfig

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SA_ENERGY_SCALE = 10.0

# stream purposes for derived seeds
_GENERATE, _SA_NOISE, _SA_ENERGY, _GRAD_NOISE = 0, 1, 2, 3


class Phase(enum.Enum):
    GRADIENT_DESCENT = "gd"
    ANNEALING = "sa"


@dataclass
class OptimizerState:
    m1: np.ndarray
    m2: np.ndarray
    step: int = 0
    iteration: int = 0
    temperature: float = 1.0
    phase: Phase = Phase.GRADIENT_DESCENT

    @classmethod
    def zeros(cls, shape) -> "OptimizerState":
        return cls(m1=np.zeros(shape), m2=np.zeros(shape))

    def reset_moments(self) -> None:
        self.m1 = np.zeros_like(self.m1)
        self.m2 = np.zeros_like(self.m2)
        self.step = 0


@dataclass(frozen=True)
class RunConfig:
    m: int = 10
    total_iters: int = 15000
    gd_block: int = 250
    sa_candidates: int = 10
    sa_sigma_scale: float = 0.2
    lr: float = 1e-2
    hybrid_fraction: float = 0.5
    B: int = 2000
    L: int = 250
    w: int = 10
    canvas: int = 1024
    supersample: int = 5
    seed: int = 0
    sigma_px: float = 2.5
    alpha_peak: float = 0.25
    cutoff: float = 3.0
    # ablation switches
    use_gradients: bool = True
    grad_noise: float = 0.0
    parameterization: str = "svd"
    objective: str = "full"
    mip: bool = True
    truncate_warmup: bool = False
    normalization_grad: bool = True

    def __post_init__(self):
        for name in ("m", "total_iters", "gd_block", "sa_candidates", "B", "L", "canvas", "supersample"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.hybrid_fraction <= 1.0:
            raise ValueError("hybrid_fraction must lie in [0, 1]")
        if not 0 <= self.w < self.L:
            raise ValueError("need 0 <= w < L")
        if self.sa_sigma_scale <= 0 or self.lr <= 0:
            raise ValueError("sa_sigma_scale and lr must be positive")
        if self.parameterization not in pipeline.PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.objective not in ("full", "moments"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def pipeline_settings(self) -> pipeline.PipelineSettings:
        return pipeline.PipelineSettings(
            B=self.B, L=self.L, w=self.w, size=self.canvas, supersample=self.supersample,
            splat=SplatConfig(self.sigma_px, self.alpha_peak, self.cutoff),
            truncate_warmup=self.truncate_warmup, normalization_grad=self.normalization_grad)

    def sa_iterations(self) -> list[int]:
        """Completed-iteration counts after which an annealing phase runs."""
        if not self.use_gradients:
            return []
        limit = self.hybrid_fraction * self.total_iters
        return [k for k in range(self.gd_block, self.total_iters + 1, self.gd_block) if k <= limit]


def temperature(iteration: int, total: int) -> float:
    return max(0.0, 1.0 - iteration / total)


def derive_seed(seed: int, iteration: int, purpose: int, j: int = 0) -> int:
    state = np.random.SeedSequence([int(seed), int(iteration), int(purpose), int(j)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def adam_step(state: OptimizerState, theta, grad, lr: float = 1e-2, project: Callable | None = None) -> np.ndarray:
    """One bias-corrected Adam update, then the optional projection."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient", {"iteration": state.iteration})
    state.step += 1
    state.m1 = ADAM_BETA1 * state.m1 + (1.0 - ADAM_BETA1) * grad
    state.m2 = ADAM_BETA2 * state.m2 + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = state.m1 / (1.0 - ADAM_BETA1 ** state.step)
    v_hat = state.m2 / (1.0 - ADAM_BETA2 ** state.step)
    out = np.asarray(theta, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return project(out) if project is not None else out


def acceptance_probability(e_cand: float, e_curr: float, temp: float, scale: float = SA_ENERGY_SCALE) -> float:
    """``min(exp(-scale * (e_cand - e_curr) / T), 1)``; at ``T = 0`` only improvements pass."""
    d = e_cand - e_curr
    if temp <= 0.0:
        return 1.0 if d < 0 else 0.0
    if d <= 0:
        return 1.0
    return math.exp(-scale * d / temp)


@dataclass(frozen=True)
class SAStep:
    iteration: int
    candidate: int
    temperature: float
    e_cand: float
    e_curr: float
    p: float
    u: float
    accepted: bool


def sa_phase(theta_curr, temp: float, energy_fn: Callable[[np.ndarray, int], float], candidates: int = 10,
             seed: int = 0, sigma_scale: float = 0.2, project: Callable | None = None,
             e_curr: float | None = None, iteration: int = 0):
    """Sequential annealing over ``candidates`` Gaussian perturbations.

    ``energy_fn(theta, j)`` evaluates a state; ``j`` indexes the call so that the
    caller can pin generation seeds (``j = 0`` is the current state).

    Returns:
        ``(theta, energy, log)`` where ``log`` lists one :class:`SAStep` per candidate.
    """
    rng = np.random.default_rng(seed)
    theta_curr = np.array(theta_curr, dtype=np.float64, copy=True)
    if e_curr is None:
        e_curr = float(energy_fn(theta_curr, 0))
    std = temp * sigma_scale
    log = []
    for j in range(1, candidates + 1):
        cand = theta_curr + rng.normal(0.0, 1.0, size=theta_curr.shape) * std
        if project is not None:
            cand = project(cand)
        e_cand = float(energy_fn(cand, j))
        p = acceptance_probability(e_cand, e_curr, temp)
        u = float(rng.random())
        accepted = e_cand < e_curr or u < p
        log.append(SAStep(iteration, j, temp, e_cand, e_curr, p, u, accepted))
        if accepted:
            theta_curr, e_curr = cand, e_cand
    return theta_curr, e_curr, log


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    total: float
    mse_ms: float
    dssim: float
    reg: float
    perceptual: float
    temperature: float
    sa_accepts: int | None


HISTORY_COLUMNS = ("iteration", "total", "mse_ms", "dssim", "reg", "perceptual", "temperature", "sa_accepts")


@dataclass
class InversionResult:
    final_code: FractalCode
    best_code: FractalCode
    best_loss: float
    best_iteration: int
    history: list[HistoryRow]
    sa_log: list[SAStep] = field(default_factory=list)
    elapsed: float = 0.0


def _row(i, br: LossBreakdown, temp, accepts):
    return HistoryRow(i, br.total, br.mse_ms, br.dssim, br.reg, br.perceptual, temp, accepts)


def run_inversion(target, cfg: RunConfig, weights: LossWeights = LossWeights(), init_code: FractalCode | None = None,
                  perceptual=None, progress: Callable[[int, HistoryRow], None] | None = None) -> InversionResult:
    """Fit a fractal code to ``target`` (square, power-of-two side, values in [0, 1])."""
    target = np.asarray(target, dtype=np.float64)
    n = target.shape[0]
    if target.ndim != 2 or target.shape[1] != n or n & (n - 1):
        raise ValueError(f"target must be square with power-of-two side, got {target.shape}")
    if n != cfg.canvas:
        raise ValueError(f"target side {n} differs from canvas {cfg.canvas}")
    t0 = time.monotonic()
    param = pipeline.PARAMETERIZATIONS[cfg.parameterization]()
    settings = cfg.pipeline_settings()
    theta = param.from_code(init_code) if init_code is not None else param.init(cfg.m, cfg.seed)
    theta = param.project(theta)
    state = OptimizerState.zeros(theta.shape)
    sa_at = set(cfg.sa_iterations())
    history: list[HistoryRow] = []
    sa_log: list[SAStep] = []
    best = (math.inf, theta.copy(), -1)
    project = param.project

    def evaluate(th, seed, with_grad):
        br, grad, _ = pipeline.evaluate(th, target, param, settings, weights, seed, cfg.objective,
                                        cfg.mip, perceptual, with_grad)
        return br, grad

    def check(br, th, i, seed):
        if not math.isfinite(br.total):
            raise DivergenceError(f"non-finite loss at iteration {i}",
                                  {"theta": th.tolist(), "iteration": i, "seed": seed})

    for i in range(cfg.total_iters):
        state.iteration = i
        state.temperature = temperature(i, cfg.total_iters)
        gen_seed = derive_seed(cfg.seed, i, _GENERATE)
        accepts = None
        if cfg.use_gradients:
            state.phase = Phase.GRADIENT_DESCENT
            br, grad = evaluate(theta, gen_seed, True)
            check(br, theta, i, gen_seed)
            if br.total < best[0]:
                best = (br.total, theta.copy(), i)
            if cfg.grad_noise > 0:
                noise_rng = np.random.default_rng(derive_seed(cfg.seed, i, _GRAD_NOISE))
                grad = grad + noise_rng.normal(0.0, cfg.grad_noise, size=grad.shape)
            theta = adam_step(state, theta, grad, cfg.lr, project)
            if (i + 1) in sa_at:
                state.phase = Phase.ANNEALING
                sa_temp = temperature(i + 1, cfg.total_iters)

                def energy(th, j, _i=i):
                    fp = pipeline.forward(th, param, settings, derive_seed(cfg.seed, _i, _SA_ENERGY, j))
                    if cfg.objective == "moments":
                        return objective.moment_loss(fp.image, target)[0]
                    return objective.mse(fp.image, target)

                theta, _, log = sa_phase(theta, sa_temp, energy, cfg.sa_candidates,
                                         seed=derive_seed(cfg.seed, i, _SA_NOISE),
                                         sigma_scale=cfg.sa_sigma_scale, project=project, iteration=i)
                sa_log.extend(log)
                accepts = sum(s.accepted for s in log)
                state.reset_moments()
        else:
            state.phase = Phase.ANNEALING

            def energy(th, j, _i=i):
                br_, _ = evaluate(th, derive_seed(cfg.seed, _i, _SA_ENERGY, j), False)
                check(br_, th, _i, j)
                return br_.total

            theta, e_now, log = sa_phase(theta, state.temperature, energy, 1,
                                         seed=derive_seed(cfg.seed, i, _SA_NOISE),
                                         sigma_scale=cfg.sa_sigma_scale, project=project, iteration=i)
            sa_log.extend(log)
            accepts = sum(s.accepted for s in log)
            br, _ = evaluate(theta, gen_seed, False)
            check(br, theta, i, gen_seed)
            if br.total < best[0]:
                best = (br.total, theta.copy(), i)
        row = _row(i, br, state.temperature, accepts)
        history.append(row)
        if progress is not None:
            progress(i, row)
        if i % 100 == 0 or i == cfg.total_iters - 1:
            logger.info("iter %d  loss %.5f  T %.3f", i, br.total, state.temperature)
    state.iteration = cfg.total_iters
    state.temperature = temperature(cfg.total_iters, cfg.total_iters)
    return InversionResult(final_code=param.to_code(theta), best_code=param.to_code(best[1]), best_loss=best[0],
                           best_iteration=best[2], history=history, sa_log=sa_log,
                           elapsed=time.monotonic() - t0)


def config_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)
