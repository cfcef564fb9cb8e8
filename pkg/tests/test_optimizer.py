import math

import numpy as np
import pytest

from ifs_invert.errors import DivergenceError
from ifs_invert.ifs_core import sierpinski_code
from ifs_invert.optimizer import (OptimizerState, RunConfig, acceptance_probability, adam_step, derive_seed,
                                  run_inversion, sa_phase, temperature)
from ifs_invert.splat_render import render_eval


def _tiny(**kw):
    base = dict(m=3, total_iters=40, gd_block=10, B=20, L=30, w=5, canvas=32, supersample=2, seed=0)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def target():
    return render_eval(sierpinski_code(), size=32, supersample=1, point_budget=200_000).image


# -- Adam ----------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_theta():
    state = OptimizerState.zeros(4)
    theta = np.arange(4.0)
    assert np.array_equal(adam_step(state, theta, np.zeros(4)), theta)
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    state = OptimizerState.zeros(3)
    g = np.array([2.0, -0.5, 1e-3])
    out = adam_step(state, np.zeros(3), g, lr=0.1)
    assert np.allclose(out, -0.1 * np.sign(g), rtol=1e-4)


def test_adam_applies_projection():
    out = adam_step(OptimizerState.zeros(2), np.zeros(2), np.ones(2), project=lambda t: t * 0)
    assert not out.any()


def test_adam_rejects_non_finite():
    with pytest.raises(DivergenceError):
        adam_step(OptimizerState.zeros(2), np.zeros(2), np.array([1.0, np.nan]))


def test_reset_moments():
    state = OptimizerState.zeros(2)
    adam_step(state, np.zeros(2), np.ones(2))
    state.reset_moments()
    assert state.step == 0 and not state.m1.any() and not state.m2.any()


# -- annealing -----------------------------------------------------------------------

def test_acceptance_probability_examples():
    assert acceptance_probability(0.6, 0.5, 0.5) == pytest.approx(math.exp(-2.0))
    assert acceptance_probability(0.4, 0.5, 0.5) == 1.0
    assert acceptance_probability(0.5, 0.5, 1.0) == 1.0
    assert acceptance_probability(0.6, 0.5, 0.0) == 0.0
    assert acceptance_probability(0.4, 0.5, 0.0) == 1.0


def test_temperature_schedule():
    assert temperature(0, 100) == 1.0
    assert temperature(50, 100) == 0.5
    assert temperature(100, 100) == 0.0
    assert temperature(150, 100) == 0.0


def test_default_schedule_has_thirty_phases():
    cfg = RunConfig()
    its = cfg.sa_iterations()
    assert len(its) == 30
    assert its[0] == 250 and its[-1] == 7500
    assert [temperature(k, cfg.total_iters) for k in its[:2]] == pytest.approx([1 - 250 / 15000, 1 - 500 / 15000])
    assert RunConfig(hybrid_fraction=0.0).sa_iterations() == []
    assert RunConfig(use_gradients=False).sa_iterations() == []


def test_sa_phase_log_is_consistent():
    def energy(th, j):
        return float(np.sum(th ** 2))

    theta, e, log = sa_phase(np.ones(6), 0.5, energy, candidates=10, seed=3)
    assert len(log) == 10
    e_curr = energy(np.ones(6), 0)
    for s in log:
        assert s.e_curr == pytest.approx(e_curr)
        assert s.p == pytest.approx(acceptance_probability(s.e_cand, s.e_curr, 0.5))
        assert s.accepted == (s.e_cand < s.e_curr or s.u < s.p)
        if s.accepted:
            e_curr = s.e_cand
    assert e == pytest.approx(e_curr) == pytest.approx(energy(theta, 0))


def test_sa_phase_at_zero_temperature_is_identity():
    theta, e, log = sa_phase(np.ones(3), 0.0, lambda t, j: float(t.sum()), candidates=5, seed=0)
    assert np.array_equal(theta, np.ones(3))
    assert not any(s.accepted for s in log)


def test_sa_perturbation_scale():
    seen = []

    def energy(th, j):
        if j:
            seen.append(th.copy())
        return 1.0

    sa_phase(np.zeros(5000), 0.5, energy, candidates=1, seed=1)
    assert np.std(seen[0]) == pytest.approx(0.5 / 5, rel=0.05)


def test_derived_seeds_differ_by_purpose_and_iteration():
    seeds = {derive_seed(0, i, p, j) for i in range(5) for p in range(4) for j in range(3)}
    assert len(seeds) == 60
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(w=300, L=250)
    with pytest.raises(ValueError):
        RunConfig(hybrid_fraction=1.5)
    with pytest.raises(ValueError):
        RunConfig(parameterization="polar")


# -- full loop -----------------------------------------------------------------------

def test_run_records_history_and_sa_phases(target):
    res = run_inversion(target, _tiny())
    assert len(res.history) == 40
    phases = [r for r in res.history if r.sa_accepts is not None]
    assert [r.iteration for r in phases] == [9, 19]
    assert len(res.sa_log) == 20
    assert res.best_loss == min(r.total for r in res.history)
    assert res.history[res.best_iteration].total == res.best_loss
    assert all(0.0 <= r.temperature <= 1.0 for r in res.history)


def test_run_is_deterministic(target):
    a = run_inversion(target, _tiny(total_iters=20))
    b = run_inversion(target, _tiny(total_iters=20))
    assert a.final_code == b.final_code
    assert a.history == b.history


def test_pure_gradient_descent(target):
    res = run_inversion(target, _tiny(hybrid_fraction=0.0, total_iters=20))
    assert not res.sa_log
    assert all(r.sa_accepts is None for r in res.history)


@pytest.mark.parametrize("kw", [
    dict(use_gradients=False),
    dict(grad_noise=0.1, hybrid_fraction=0.0),
    dict(parameterization="naive"),
    dict(objective="moments"),
    dict(mip=False),
    dict(truncate_warmup=True),
    dict(normalization_grad=False),
])
def test_ablations_run(target, kw):
    res = run_inversion(target, _tiny(total_iters=12, **kw))
    assert len(res.history) == 12
    assert np.all(np.isfinite(res.final_code.theta))
    if not kw.get("use_gradients", True):
        assert len(res.sa_log) == 12


def test_target_validation(target):
    with pytest.raises(ValueError):
        run_inversion(target, _tiny(canvas=64))
    with pytest.raises(ValueError):
        run_inversion(np.zeros((30, 30)), _tiny(canvas=30))


def test_gradient_descent_reduces_loss(target):
    res = run_inversion(target, _tiny(total_iters=60, hybrid_fraction=0.0, lr=3e-2))
    first = np.mean([r.total for r in res.history[:5]])
    last = np.mean([r.total for r in res.history[-5:]])
    assert last < first
