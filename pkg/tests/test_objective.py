import numpy as np
import pytest

from ifs_invert.errors import PerceptualPluginError, ZeroMassError
from ifs_invert.objective import (SSIM_C1, LossWeights, build_pyramid, dssim, image_moments, moment_loss, mse,
                                  multiscale_mse, regularizer, ssim, total_loss)


def _fd_image(fn, R, h=1e-6):
    g = np.zeros_like(R)
    for idx in np.ndindex(R.shape):
        e = np.zeros_like(R)
        e[idx] = h
        g[idx] = (fn(R + e) - fn(R - e)) / (2 * h)
    return g


def _brute_ssim(R, I, win=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    k = np.arange(win) - win // 2
    g = np.exp(-k ** 2 / (2 * sigma ** 2))
    W = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(R.shape[0] - win + 1):
        for j in range(R.shape[1] - win + 1):
            x, y = R[i:i + win, j:j + win], I[i:i + win, j:j + win]
            mx, my = np.sum(W * x), np.sum(W * y)
            vx, vy = np.sum(W * x * x) - mx ** 2, np.sum(W * y * y) - my ** 2
            cxy = np.sum(W * x * y) - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


# -- pyramid / multi-scale MSE ---------------------------------------------------------

def test_pyramid_levels():
    levels = build_pyramid(np.zeros((1024, 1024)))
    assert [lv.shape[0] for lv in levels] == [2 ** k for k in range(10, -1, -1)]


def test_pyramid_preserves_mean_and_constants():
    x = np.random.default_rng(0).random((64, 64))
    assert all(abs(lv.mean() - x.mean()) < 1e-9 for lv in build_pyramid(x))
    assert all(np.allclose(lv, 0.3) for lv in build_pyramid(np.full((16, 16), 0.3)))


def test_pyramid_rejects_odd_sizes():
    with pytest.raises(ValueError):
        build_pyramid(np.zeros((48, 48)))
    with pytest.raises(ValueError):
        build_pyramid(np.zeros((16, 32)))


def test_multiscale_mse_examples():
    value, grad = multiscale_mse(np.ones((1024, 1024)), np.zeros((1024, 1024)))
    assert value == pytest.approx(11.0)
    x = np.random.default_rng(1).random((32, 32))
    value, grad = multiscale_mse(x, x)
    assert value == 0.0 and not grad.any()
    with pytest.raises(ValueError):
        multiscale_mse(np.zeros((8, 8)), np.zeros((4, 4)))


@pytest.mark.parametrize("mip", [True, False])
def test_multiscale_mse_gradient(mip):
    rng = np.random.default_rng(2)
    R, I = rng.random((2, 16, 16))
    _, grad = multiscale_mse(R, I, mip=mip)
    numeric = _fd_image(lambda r: multiscale_mse(r, I, mip=mip)[0], R)
    assert np.allclose(grad, numeric, rtol=1e-3, atol=1e-9)


def test_single_scale_mse():
    assert mse(np.ones((4, 4)), np.zeros((4, 4))) == 1.0
    assert multiscale_mse(np.ones((4, 4)), np.zeros((4, 4)), mip=False)[0] == 1.0


# -- SSIM ------------------------------------------------------------------------------

def test_dssim_identity():
    x = np.random.default_rng(3).random((24, 24))
    value, grad = dssim(x, x)
    assert value == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grad).max() < 1e-12


@pytest.mark.parametrize("a, b", [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5)])
def test_constant_images_closed_form(a, b):
    R, I = np.full((16, 16), a), np.full((16, 16), b)
    expected = (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
    assert ssim(R, I) == pytest.approx(expected, rel=1e-9)
    assert dssim(R, I)[0] == pytest.approx((1 - expected) / 2, rel=1e-9)


def test_inverted_checkerboard():
    yy, xx = np.mgrid[0:32, 0:32]
    I = ((yy // 4 + xx // 4) % 2).astype(float)
    value, _ = dssim(1.0 - I, I)
    assert value > 0.4
    assert ssim(1.0 - I, I) == pytest.approx(_brute_ssim(1.0 - I, I), abs=1e-9)


def test_ssim_matches_brute_force_oracle():
    rng = np.random.default_rng(4)
    R, I = rng.random((2, 20, 20))
    assert ssim(R, I) == pytest.approx(_brute_ssim(R, I), abs=1e-9)


def test_dssim_gradient():
    rng = np.random.default_rng(5)
    R, I = rng.random((2, 16, 16))
    _, grad = dssim(R, I)
    numeric = _fd_image(lambda r: dssim(r, I)[0], R)
    assert np.allclose(grad, numeric, rtol=1e-3, atol=1e-9)


def test_ssim_window_requirement():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- regulariser ---------------------------------------------------------------------

def test_regularizer_examples():
    assert regularizer([[0.5, 0.5]], [[0.0, 0.0]])[0] == pytest.approx(0.5)
    expected = 0.81 + 0.01 + 10 * (1.9 / 1.1 - 1) ** 2
    assert regularizer([[0.9, 0.1]], [[0.0, 0.0]])[0] == pytest.approx(expected)
    assert expected == pytest.approx(6.109256198347107, abs=1e-12)  # 0.82 + 10 * (8/11) ** 2
    assert regularizer([[0.0, 0.0]], [[0.0, 0.0]])[0] == 0.0


def test_regularizer_orders_sigmas():
    a = regularizer([[0.9, 0.1]], [[0.1, 0.2]])
    b = regularizer([[0.1, 0.9]], [[0.1, 0.2]])
    assert a[0] == pytest.approx(b[0])
    assert np.allclose(a[1], b[1][:, ::-1])


def test_regularizer_gradient():
    rng = np.random.default_rng(6)
    sigma, b = rng.uniform(0.05, 0.95, (3, 2)), rng.uniform(-0.9, 0.9, (3, 2))
    _, dsig, db = regularizer(sigma, b)
    num_s = _fd_image(lambda s: regularizer(s, b)[0], sigma)
    num_b = _fd_image(lambda v: regularizer(sigma, v)[0], b)
    assert np.allclose(dsig, num_s, rtol=1e-6) and np.allclose(db, num_b, rtol=1e-6)


# -- total ------------------------------------------------------------------------------

def test_total_loss_zero_cases():
    x = np.random.default_rng(7).random((16, 16))
    zero_code = (np.zeros((2, 2)), np.zeros((2, 2)))
    assert total_loss(x, x, zero_code)[0].total == pytest.approx(0.0, abs=1e-12)
    w0 = LossWeights(mse=0, ssim=0, lpips=0, reg=0, cond=0)
    assert total_loss(x, 1 - x, ([[0.5, 0.2]], [[0.3, 0.1]]), w0)[0].total == 0.0


def test_total_loss_is_weighted_sum():
    rng = np.random.default_rng(8)
    R, I = rng.random((2, 16, 16))
    code = (rng.uniform(0.1, 0.9, (3, 2)), rng.uniform(-0.5, 0.5, (3, 2)))
    plugin = lambda r, i: (float(np.mean(np.abs(r - i))), np.sign(r - i) / r.size)  # noqa: E731
    br, _, _, _ = total_loss(R, I, code, perceptual=plugin)
    assert br.total == pytest.approx(10 * br.mse_ms + br.dssim + 2 * br.perceptual + 0.01 * br.reg, abs=1e-9)
    assert min(br.mse_ms, br.dssim, br.perceptual, br.reg) >= 0
    assert total_loss(R, I, code)[0].perceptual == 0.0


def test_total_loss_gradient_wrt_render():
    rng = np.random.default_rng(9)
    R, I = rng.random((2, 16, 16))
    code = ([[0.4, 0.3]], [[0.1, 0.0]])
    _, grad, _, _ = total_loss(R, I, code)
    numeric = _fd_image(lambda r: total_loss(r, I, code)[0].total, R)
    assert np.allclose(grad, numeric, rtol=1e-3, atol=1e-8)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(mse=-1)
    assert LossWeights() == LossWeights(mse=10, ssim=1, lpips=2, reg=1e-2, cond=10)


def test_perceptual_plugin_errors():
    R = np.zeros((16, 16))
    code = ([[0.5, 0.5]], [[0.0, 0.0]])

    def broken(r, i):
        raise RuntimeError("model missing")

    with pytest.raises(PerceptualPluginError):
        total_loss(R, R, code, perceptual=broken)
    with pytest.raises(PerceptualPluginError):
        total_loss(R, R, code, perceptual=lambda r, i: (-1.0, np.zeros_like(r)))
    with pytest.raises(PerceptualPluginError):
        total_loss(R, R, code, perceptual=lambda r, i: (0.0, np.zeros((2, 2))))


# -- moments ----------------------------------------------------------------------------

def test_moment_loss_identity_and_hand_example():
    R = np.array([[1.0, 0.0], [0.0, 0.0]])
    I = np.array([[0.0, 0.0], [0.0, 1.0]])
    assert moment_loss(R, R)[0] == 0.0
    # centroids (0.25, 0.25) and (0.75, 0.75): first-order distance 0.25 + 0.25
    assert moment_loss(R, I, order=1)[0] == pytest.approx(0.5)


def test_translation_changes_first_moments_by_shift():
    img = np.zeros((16, 16))
    img[3:6, 2:7] = 1.0
    shifted = np.roll(img, 2, axis=1)
    d = image_moments(shifted, 1) - image_moments(img, 1)
    # order-1 moments: (p, q) = (0, 1) then (1, 0)
    assert d[0] == pytest.approx(0.0)
    assert d[1] == pytest.approx(2 / 16)


def test_moment_loss_gradient():
    rng = np.random.default_rng(10)
    R, I = rng.random((2, 16, 16))
    _, grad = moment_loss(R, I)
    numeric = _fd_image(lambda r: moment_loss(r, I)[0], R)
    assert np.allclose(grad, numeric, rtol=1e-3, atol=1e-9)


def test_zero_mass():
    with pytest.raises(ZeroMassError):
        moment_loss(np.zeros((4, 4)), np.ones((4, 4)))
