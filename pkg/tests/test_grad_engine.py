import numpy as np
import pytest

from ifs_invert.chaos_gen import run_chaos_game
from ifs_invert.errors import ReplayMismatchError
from ifs_invert.grad_engine import (backprop_parameterization, backprop_trajectories, finite_difference_gradient,
                                    relative_errors)
from ifs_invert.ifs_core import B_SLICE, S_SLICE, FractalCode, init_params, svd_factors
from ifs_invert.pipeline import gradient_check


def _maps(theta):
    _, _, _, M, b = svd_factors(theta)
    return M, b


def test_one_step_chain_rule():
    M = np.array([[[0.3, 0.1], [-0.2, 0.4]]])
    b = np.array([[0.1, -0.2]])
    tape = run_chaos_game((M, b), [1.0], B=1, L=1, w=0, seed=5)
    g = np.array([[0.7, -1.3]])
    dM, db = backprop_trajectories(tape, (M, b), g)
    assert np.allclose(db[0], g[0])
    assert np.allclose(dM[0], np.outer(g[0], tape.starts[0]))


def test_unused_map_gets_zero_gradient():
    theta = init_params(3, 0).params
    M, b = _maps(theta)
    p = np.array([0.5, 0.5, 0.0])
    tape = run_chaos_game((M, b), p, B=8, L=20, w=2, seed=1)
    assert not np.any(tape.indices == 2)
    dM, db = backprop_trajectories(tape, (M, b), np.ones((tape.n_emitted, 2)))
    assert np.all(dM[2] == 0) and np.all(db[2] == 0)
    assert np.any(dM[0] != 0)


def test_trajectory_gradient_matches_finite_differences():
    theta = init_params(3, 4).params
    M, b = _maps(theta)
    p = np.full(3, 1 / 3)
    tape = run_chaos_game((M, b), p, B=4, L=12, w=2, seed=9)
    dM, db = backprop_trajectories(tape, (M, b), np.ones((tape.n_emitted, 2)))
    flat = np.concatenate([M.ravel(), b.ravel()])

    def loss(v):
        Mv, bv = v[:12].reshape(3, 2, 2), v[12:].reshape(3, 2)
        # same seed, same map indices: only the positions move
        return float(run_chaos_game((Mv, bv), p, 4, 12, 2, seed=9, check_contractive=False).emitted.sum())

    numeric = finite_difference_gradient(flat, loss, h=1e-6)
    analytic = np.concatenate([dM.ravel(), db.ravel()])
    assert np.all(relative_errors(analytic, numeric) <= 1e-4)


def test_replay_mismatch_detected():
    theta = init_params(2, 0).params
    tape = run_chaos_game(_maps(theta), [0.5, 0.5], 4, 10, 2, seed=0)
    with pytest.raises(ReplayMismatchError):
        backprop_trajectories(tape, _maps(init_params(2, 1).params), np.ones((tape.n_emitted, 2)))
    with pytest.raises(ReplayMismatchError):
        backprop_trajectories(tape, _maps(theta), np.ones((3, 2)))


def test_truncated_warmup_drops_warmup_contributions():
    theta = init_params(2, 3).params
    M, b = _maps(theta)
    tape = run_chaos_game((M, b), [0.5, 0.5], B=6, L=10, w=4, seed=2)
    g = np.random.default_rng(0).normal(size=(tape.n_emitted, 2))
    full = backprop_trajectories(tape, (M, b), g)
    trunc = backprop_trajectories(tape, (M, b), g, truncate_warmup=True)
    assert not np.allclose(full[0], trunc[0])
    # with no warm-up there is nothing to truncate
    tape0 = run_chaos_game((M, b), [0.5, 0.5], B=6, L=10, w=0, seed=2)
    g0 = np.ones((tape0.n_emitted, 2))
    a, c = backprop_trajectories(tape0, (M, b), g0), backprop_trajectories(tape0, (M, b), g0, truncate_warmup=True)
    assert np.allclose(a[0], c[0]) and np.allclose(a[1], c[1])


def test_gradient_is_linear_in_upstream():
    theta = init_params(3, 2).params
    M, b = _maps(theta)
    tape = run_chaos_game((M, b), np.full(3, 1 / 3), 8, 16, 3, seed=4)
    rng = np.random.default_rng(1)
    g1, g2 = rng.normal(size=(2, tape.n_emitted, 2))
    s = backprop_trajectories(tape, (M, b), g1 + g2)
    a, c = backprop_trajectories(tape, (M, b), g1), backprop_trajectories(tape, (M, b), g2)
    assert np.allclose(s[0], a[0] + c[0]) and np.allclose(s[1], a[1] + c[1])


# -- parameterisation ------------------------------------------------------------------

def test_parameterization_matches_finite_differences():
    code = init_params(1, 6)

    def loss(theta):
        _, _, _, M, b = svd_factors(theta.reshape(1, 12))
        return float(M.sum() + b.sum())

    analytic = backprop_parameterization(code, np.ones((1, 2, 2)), np.ones((1, 2)))
    numeric = finite_difference_gradient(code.theta, loss, h=1e-6)
    assert np.allclose(analytic.ravel(), numeric, rtol=1e-5, atol=1e-9)


def test_direct_sigma_gradient_is_chained():
    code = init_params(2, 1)
    dsig = np.array([[1.0, -2.0], [0.5, 0.0]])
    out = backprop_parameterization(code, np.zeros((2, 2, 2)), np.zeros((2, 2)), dsigma=dsig)
    sigma = svd_factors(code.params)[2]
    assert np.allclose(out[:, S_SLICE], dsig * sigma * (1 - sigma))


def test_saturated_sigmoid_kills_sigma_gradient():
    row = np.array([1, 0, 0, 1, 1, 0, 0, 1, 40.0, -40.0, 0, 0], dtype=float)
    out = backprop_parameterization(FractalCode(row[None]), np.ones((1, 2, 2)), np.zeros((1, 2)))
    assert np.all(np.abs(out[0, S_SLICE]) < 1e-15)


def test_offset_gradient_at_zero_passes_unchanged():
    row = np.array([1, 0, 0, 1, 1, 0, 0, 1, 0, 0, 0, 0], dtype=float)
    gb = np.array([[0.3, -0.7]])
    out = backprop_parameterization(FractalCode(row[None]), np.zeros((1, 2, 2)), gb)
    assert np.allclose(out[0, B_SLICE], gb[0])


# -- finite-difference oracle --------------------------------------------------------

def test_fd_on_quadratic():
    theta = np.random.default_rng(0).normal(size=12)
    g = finite_difference_gradient(theta, lambda t: 0.5 * float(t @ t), h=1e-4)
    assert np.allclose(g, theta, atol=1e-8)


def test_fd_constant_coordinate_is_zero():
    g = finite_difference_gradient(np.ones(4), lambda t: float(t[0] ** 2))
    assert np.all(g[1:] == 0.0)


def test_adjoint_norm_bound():
    theta = init_params(3, 8).params
    M, b = _maps(theta)
    tape = run_chaos_game((M, b), np.full(3, 1 / 3), 4, 30, 5, seed=3)
    g = np.random.default_rng(2).normal(size=(tape.n_emitted, 2))
    dM, db = backprop_trajectories(tape, (M, b), g)
    # |db| sums adjoints; each adjoint is at most K * max|g| for K emitted steps
    K = tape.L - tape.w
    bound = tape.B * tape.L * K * np.linalg.norm(g, axis=1).max()
    assert np.linalg.norm(db) <= bound
    assert np.all(np.isfinite(dM))


def test_end_to_end_gradient_check():
    res = gradient_check(m=3, B=8, L=20, w=4, size=64, supersample=2, seed=0)
    assert res.analytic.size == 36
    assert res.pass_fraction >= 0.95
