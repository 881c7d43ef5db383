import numpy as np
import pytest

from splatmap.loss import (ExposureAffine, apply_exposure, photometric_loss,
                           ssim, ssim_backward, ssim_forward)


def rand_image(rng, h=12, w=14):
    return rng.uniform(0.0, 1.0, (h, w, 3))


class TestApplyExposure:
    def test_identity(self):
        rng = np.random.default_rng(0)
        img = rand_image(rng)
        np.testing.assert_array_equal(apply_exposure(ExposureAffine.identity(), img), img)

    def test_scale_by_two(self):
        E = ExposureAffine.identity()
        E.matrix[:, :3] *= 2.0
        img = np.full((4, 4, 3), 0.25)
        np.testing.assert_allclose(apply_exposure(E, img), 0.5)

    def test_matches_per_pixel_affine_oracle(self):
        rng = np.random.default_rng(1)
        E = ExposureAffine(rng.normal(size=(3, 4)))
        img = rand_image(rng)
        got = apply_exposure(E, img)
        for py in range(img.shape[0]):
            for px in range(0, img.shape[1], 3):
                want = E.matrix[:, :3] @ img[py, px] + E.matrix[:, 3]
                np.testing.assert_allclose(got[py, px], want, rtol=1e-12)


class TestSsim:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(2)
        for _ in range(3):
            img = rand_image(rng)
            assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rand_image(rng), rand_image(rng)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rand_image(rng, 8, 9)
        y = rand_image(rng, 8, 9)
        val, state = ssim_forward(x, y)
        grad = ssim_backward(state, 1.0, x.shape)
        eps = 1e-6
        for (py, px, c) in [(0, 0, 0), (3, 4, 1), (7, 8, 2), (5, 2, 0)]:
            x[py, px, c] += eps
            vp, _ = ssim_forward(x, y)
            x[py, px, c] -= 2 * eps
            vm, _ = ssim_forward(x, y)
            x[py, px, c] += eps
            fd = (vp - vm) / (2 * eps)
            assert grad[py, px, c] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestPhotometricLoss:
    def test_zero_when_equal(self):
        rng = np.random.default_rng(5)
        img = rand_image(rng)
        loss, d_rendered, d_E, parts = photometric_loss(
            img, img, ExposureAffine.identity(), 0.2)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert parts["ssim"] == pytest.approx(1.0, abs=1e-10)

    def test_pure_l1_constant_difference(self):
        a = np.full((6, 6, 3), 0.4)
        b = np.full((6, 6, 3), 0.5)
        loss, _, _, parts = photometric_loss(a, b, ExposureAffine.identity(), 0.0)
        assert loss == pytest.approx(0.1, rel=1e-9)
        assert parts["l1"] == pytest.approx(0.1, rel=1e-9)

    def test_positive_when_differs(self):
        rng = np.random.default_rng(6)
        a, b = rand_image(rng), rand_image(rng)
        loss, *_ = photometric_loss(a, b, ExposureAffine.identity(), 0.2)
        assert loss > 0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)),
                             ExposureAffine.identity(), 0.2)

    @pytest.mark.parametrize("lam", [0.0, 0.2, 1.0])
    def test_gradients_match_finite_differences(self, lam):
        rng = np.random.default_rng(7)
        rendered = rand_image(rng, 8, 8)
        gt = rand_image(rng, 8, 8)
        E = ExposureAffine(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
                           + rng.normal(0, 0.05, (3, 4)))
        loss, d_rendered, d_E, _ = photometric_loss(rendered, gt, E, lam)
        eps = 1e-6
        worst = 0.0
        for (py, px, c) in [(0, 0, 0), (4, 5, 1), (7, 7, 2), (2, 6, 0), (5, 1, 2)]:
            rendered[py, px, c] += eps
            lp = photometric_loss(rendered, gt, E, lam)[0]
            rendered[py, px, c] -= 2 * eps
            lm = photometric_loss(rendered, gt, E, lam)[0]
            rendered[py, px, c] += eps
            fd = (lp - lm) / (2 * eps)
            err = abs(d_rendered[py, px, c] - fd) / max(abs(fd), 1e-9)
            worst = max(worst, err)
        flatE = E.matrix.reshape(-1)
        for i in range(12):
            flatE[i] += eps
            lp = photometric_loss(rendered, gt, E, lam)[0]
            flatE[i] -= 2 * eps
            lm = photometric_loss(rendered, gt, E, lam)[0]
            flatE[i] += eps
            fd = (lp - lm) / (2 * eps)
            err = abs(d_E.reshape(-1)[i] - fd) / max(abs(fd), 1e-9)
            worst = max(worst, err)
        assert worst <= 1e-5

    def test_exposure_gradient_zero_at_optimum(self):
        # E[C] == gt pixelwise: only the (subgradient-zero) L1 kink remains
        rng = np.random.default_rng(8)
        rendered = rand_image(rng)
        E = ExposureAffine(rng.normal(size=(3, 4)) * 0.1
                           + np.concatenate([np.eye(3), np.zeros((3, 1))], 1))
        gt = apply_exposure(E, rendered)
        loss, d_rendered, d_E, _ = photometric_loss(rendered, gt, E, 0.2)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(d_E, 0.0, atol=1e-12)
        np.testing.assert_allclose(d_rendered, 0.0, atol=1e-12)
