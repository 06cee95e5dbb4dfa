"""Velocity integration, warping, adjoints, and regularity diagnostics."""

import numpy as np
import pytest
from scipy import ndimage

from t1map.field import (
    DisplacementField,
    VelocityField,
    compose,
    grad_penalty,
    integrate_svf,
    jacobian_stats,
    node_shape,
    vjp_compose,
    vjp_integrate,
    vjp_warp,
    warp_image,
    zero_velocity,
)
from t1map.imaging import Grid2D


def smooth_velocity(grid, rng, max_px, sigma_nodes=3.0):
    hh, ww = node_shape(grid)
    vx = ndimage.gaussian_filter(rng.standard_normal((hh, ww)), sigma_nodes)
    vy = ndimage.gaussian_filter(rng.standard_normal((hh, ww)), sigma_nodes)
    scale = max_px / max(np.hypot(vx, vy).max(), 1e-12)
    return VelocityField(grid, vx * scale, vy * scale)


class TestIntegrate:
    def test_zero_velocity_is_identity(self, grid16):
        d = integrate_svf(zero_velocity(grid16))
        assert np.abs(d.dx).max() == 0.0
        assert np.abs(d.dy).max() == 0.0

    def test_constant_velocity_is_translation(self):
        grid = Grid2D(32, 32)
        hh, ww = node_shape(grid)
        d = integrate_svf(VelocityField(grid, np.full((hh, ww), 3.0),
                                        np.zeros((hh, ww))))
        inner = np.s_[2:-2, 2:-2]
        np.testing.assert_allclose(d.dx[inner], 3.0, atol=1e-6)
        np.testing.assert_allclose(d.dy[inner], 0.0, atol=1e-6)

    def test_linear_velocity_closed_form(self):
        # radial flow: dx/dt = a*(x - c) has displacement (e^a - 1)*(x - c)
        a = 0.05
        grid = Grid2D(64, 64)
        hh, ww = node_shape(grid)
        jy, jx = np.mgrid[0:hh, 0:ww]
        c = 31.5
        vel = VelocityField(grid, a * (2 * jx - c), a * (2 * jy - c))
        d = integrate_svf(vel)

        # independent check of the closed form by fine RK4 on the scalar ODE
        def rk4(x0, n=2048):
            x, h = x0, 1.0 / n
            for _ in range(n):
                k1 = a * (x - c)
                k2 = a * (x + 0.5 * h * k1 - c)
                k3 = a * (x + 0.5 * h * k2 - c)
                k4 = a * (x + h * k3 - c)
                x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            return x - x0

        x_probe = 47.0
        assert rk4(x_probe) == pytest.approx((np.exp(a) - 1) * (x_probe - c),
                                             rel=1e-10)

        py, px = np.mgrid[0:64, 0:64]
        expect = (np.exp(a) - 1.0) * (px - c)
        m = 6
        sel = np.s_[m:-m, m:-m]
        rel = np.abs(d.dx[sel] - expect[sel]) / np.maximum(np.abs(expect[sel]), 1e-3)
        assert rel.max() < 1e-3

    def test_inverse_composition_near_identity(self, rng):
        grid = Grid2D(32, 32)
        vel = smooth_velocity(grid, rng, 3.0)
        fwd = integrate_svf(vel)
        bwd = integrate_svf(VelocityField(grid, -vel.vx, -vel.vy))
        cx, cy = compose(fwd.dx, fwd.dy, bwd.dx, bwd.dy)
        m = 5
        assert np.hypot(cx, cy)[m:-m, m:-m].max() < 0.05

    def test_steps_must_be_positive(self, grid16):
        with pytest.raises(ValueError):
            integrate_svf(zero_velocity(grid16), steps=0)


class TestWarp:
    def test_identity(self, grid8, rng):
        img = rng.normal(size=(8, 8))
        d = DisplacementField(grid8, np.zeros((8, 8)), np.zeros((8, 8)))
        np.testing.assert_array_equal(warp_image(img, d), img)

    def test_integer_shift_with_clamp(self, grid8):
        img = np.tile(np.arange(8.0)[:, None], (1, 8))  # distinct rows
        d = DisplacementField(grid8, np.zeros((8, 8)), np.ones((8, 8)))
        out = warp_image(img, d)
        np.testing.assert_array_equal(out[:-1], img[1:])
        np.testing.assert_array_equal(out[-1], img[-1])  # clamped bottom row

    def test_half_pixel_average(self, grid8, rng):
        img = rng.normal(size=(8, 8))
        d = DisplacementField(grid8, np.full((8, 8), 0.5), np.zeros((8, 8)))
        out = warp_image(img, d)
        expect = 0.5 * (img[:, :-1] + img[:, 1:])
        np.testing.assert_allclose(out[:, :-1], expect, atol=1e-12)

    def test_linear_in_image(self, grid8, rng):
        a = rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 8))
        d = DisplacementField(grid8, rng.uniform(-1, 1, (8, 8)),
                              rng.uniform(-1, 1, (8, 8)))
        lhs = warp_image(2.5 * a - 0.7 * b, d)
        rhs = 2.5 * warp_image(a, d) - 0.7 * warp_image(b, d)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestJacobian:
    def test_zero_displacement(self, grid8):
        d = DisplacementField(grid8, np.zeros((8, 8)), np.zeros((8, 8)))
        stats = jacobian_stats(d)
        assert stats.mean_det == pytest.approx(1.0)
        assert stats.nonpositive == 0

    def test_translation_is_volume_preserving(self, grid8):
        d = DisplacementField(grid8, np.full((8, 8), 1.3), np.full((8, 8), -0.4))
        stats = jacobian_stats(d)
        assert stats.mean_det == pytest.approx(1.0)
        assert stats.nonpositive == 0

    def test_uniform_dilation(self):
        grid = Grid2D(32, 32)
        yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
        d = DisplacementField(grid, 0.01 * xx, 0.01 * yy)
        stats = jacobian_stats(d)
        assert stats.mean_det == pytest.approx(1.01**2, rel=1e-12)
        assert stats.nonpositive == 0

    def test_fold_detected(self, grid8):
        # swap two adjacent columns past each other around x=3.5
        dx = np.zeros((8, 8))
        dx[:, 3] = 3.0
        dx[:, 4] = -3.0
        d = DisplacementField(grid8, dx, np.zeros((8, 8)))
        # direct 2x2 determinant at the crossing column: 1 + d(dx)/dx < 0
        assert (1.0 + (dx[4, 4] - dx[4, 2]) / 2.0) < 0
        assert jacobian_stats(d).nonpositive > 0


class TestGradPenalty:
    def test_constant_field_zero(self, grid16):
        hh, ww = node_shape(grid16)
        vel = VelocityField(grid16, np.full((hh, ww), 2.0), np.full((hh, ww), -1.0))
        value, gx, gy = grad_penalty(vel)
        assert value == 0.0
        assert np.abs(gx).max() == 0.0
        assert np.abs(gy).max() == 0.0

    def test_linear_ramp_matches_direct_sum(self, grid16):
        hh, ww = node_shape(grid16)
        g = 0.37
        vx = g * np.tile(np.arange(ww, dtype=np.float64), (hh, 1))
        vel = VelocityField(grid16, vx, np.zeros((hh, ww)))
        value, _, _ = grad_penalty(vel)
        # direct summation oracle over the forward-difference stencil
        expected = 0.0
        for i in range(hh):
            for j in range(ww - 1):
                expected += (vx[i, j + 1] - vx[i, j]) ** 2
        expected /= hh * ww
        assert value == pytest.approx(expected, rel=1e-12)
        assert value == pytest.approx(g**2 * (ww - 1) / ww, rel=1e-12)

    def test_gradient_matches_fd(self, grid16, rng):
        hh, ww = node_shape(grid16)
        vx = rng.normal(size=(hh, ww))
        vy = rng.normal(size=(hh, ww))
        _, gx, gy = grad_penalty(VelocityField(grid16, vx, vy))
        h = 1e-3  # the penalty is quadratic: central differences are exact
        worst = 0.0
        for _ in range(20):
            i, j = rng.integers(0, hh), rng.integers(0, ww)
            for comp, grad in ((0, gx), (1, gy)):
                arrs_p = [vx.copy(), vy.copy()]
                arrs_m = [vx.copy(), vy.copy()]
                arrs_p[comp][i, j] += h
                arrs_m[comp][i, j] -= h
                fp = grad_penalty(VelocityField(grid16, *arrs_p))[0]
                fm = grad_penalty(VelocityField(grid16, *arrs_m))[0]
                fd = (fp - fm) / (2 * h)
                worst = max(worst, abs(fd - grad[i, j]) / max(abs(fd), 1e-12))
        assert worst < 1e-7


class TestAdjoints:
    def test_warp_vjp_zero_displacement_linear_image(self, grid8, rng):
        # on a lattice-linear image the interpolant is globally linear, so
        # central differences are exact and equal the image gradient
        yy, xx = np.mgrid[0:8, 0:8].astype(np.float64)
        img = 0.7 * xx - 1.3 * yy + 0.2
        d = DisplacementField(grid8, np.zeros((8, 8)), np.zeros((8, 8)))
        cot = rng.normal(size=(8, 8))
        _, cdx, cdy = vjp_warp(img, d, cot)
        h = 1e-6
        for _ in range(12):
            i, j = rng.integers(1, 7, 2)  # interior: border gates are zero
            for comp, cg in ((0, cdx), (1, cdy)):
                dp = [np.zeros((8, 8)), np.zeros((8, 8))]
                dm = [np.zeros((8, 8)), np.zeros((8, 8))]
                dp[comp][i, j] += h
                dm[comp][i, j] -= h
                fp = np.sum(cot * warp_image(img, DisplacementField(grid8, *dp)))
                fm = np.sum(cot * warp_image(img, DisplacementField(grid8, *dm)))
                assert (fp - fm) / (2 * h) == pytest.approx(cg[i, j], abs=1e-5)
        # and the interior analytic value is the image gradient times cot
        np.testing.assert_allclose(cdx[1:-1, 1:-1], 0.7 * cot[1:-1, 1:-1],
                                   atol=1e-12)
        np.testing.assert_allclose(cdy[1:-1, 1:-1], -1.3 * cot[1:-1, 1:-1],
                                   atol=1e-12)

    def test_warp_vjp_random_offsets(self, grid8, rng):
        img = rng.normal(size=(8, 8))
        dx = rng.uniform(0.1, 0.4, (8, 8))
        dy = rng.uniform(-0.4, -0.1, (8, 8))
        d = DisplacementField(grid8, dx, dy)
        cot = rng.normal(size=(8, 8))
        cimg, cdx, cdy = vjp_warp(img, d, cot)
        h = 1e-6
        for _ in range(20):
            i, j = rng.integers(0, 8, 2)
            dp, dm = dx.copy(), dx.copy()
            dp[i, j] += h
            dm[i, j] -= h
            fd = (np.sum(cot * warp_image(img, DisplacementField(grid8, dp, dy)))
                  - np.sum(cot * warp_image(img, DisplacementField(grid8, dm, dy)))) / (2 * h)
            assert fd == pytest.approx(cdx[i, j], abs=1e-5)
        # image-side adjoint via linearity: <vjp_img(cot), u> == <cot, warp(u)>
        u = rng.normal(size=(8, 8))
        assert np.sum(cimg * u) == pytest.approx(
            np.sum(cot * warp_image(u, d)), rel=1e-12)

    def test_integrate_vjp_zero_velocity(self, grid8, rng):
        # at zero velocity the chain reduces to scaled upsampling
        vel = zero_velocity(grid8)
        cdx = rng.normal(size=(8, 8))
        cdy = rng.normal(size=(8, 8))
        gvx, gvy = vjp_integrate(vel, 7, cdx, cdy)
        h = 1e-6
        hh, ww = node_shape(grid8)
        for _ in range(16):
            i, j = rng.integers(0, hh), rng.integers(0, ww)
            for comp, grad in ((0, gvx), (1, gvy)):
                vp = [np.zeros((hh, ww)), np.zeros((hh, ww))]
                vm = [np.zeros((hh, ww)), np.zeros((hh, ww))]
                vp[comp][i, j] += h
                vm[comp][i, j] -= h
                dp = integrate_svf(VelocityField(grid8, *vp), 7)
                dm = integrate_svf(VelocityField(grid8, *vm), 7)
                fd = (np.sum(cdx * dp.dx) + np.sum(cdy * dp.dy)
                      - np.sum(cdx * dm.dx) - np.sum(cdy * dm.dy)) / (2 * h)
                assert fd == pytest.approx(grad[i, j], abs=1e-5)

    def test_integrate_vjp_random_velocity(self, grid8, rng):
        hh, ww = node_shape(grid8)
        vx = rng.normal(0, 0.5, (hh, ww))
        vy = rng.normal(0, 0.5, (hh, ww))
        vel = VelocityField(grid8, vx, vy)
        cdx = rng.normal(size=(8, 8))
        cdy = rng.normal(size=(8, 8))
        gvx, gvy = vjp_integrate(vel, 7, cdx, cdy)
        h = 1e-6
        worst = 0.0
        for _ in range(16):
            i, j = rng.integers(0, hh), rng.integers(0, ww)
            for comp, grad in ((0, gvx), (1, gvy)):
                vp = [vx.copy(), vy.copy()]
                vm = [vx.copy(), vy.copy()]
                vp[comp][i, j] += h
                vm[comp][i, j] -= h
                dp = integrate_svf(VelocityField(grid8, *vp), 7)
                dm = integrate_svf(VelocityField(grid8, *vm), 7)
                fd = (np.sum(cdx * dp.dx) + np.sum(cdy * dp.dy)
                      - np.sum(cdx * dm.dx) - np.sum(cdy * dm.dy)) / (2 * h)
                worst = max(worst,
                            abs(fd - grad[i, j]) / max(abs(grad[i, j]), 1e-9))
        assert worst < 1e-5

    def test_directional_derivative_identity(self, grid8, rng):
        # <vjp(c), u> == <c, jvp(u)> with jvp by forward differences taken
        # along a single axis, where the interpolant is piecewise linear and
        # the finite difference is exact
        img = rng.normal(size=(8, 8))
        dx = rng.uniform(0.25, 0.45, (8, 8))
        dy = rng.uniform(0.25, 0.45, (8, 8))
        d = DisplacementField(grid8, dx, dy)
        cot = rng.normal(size=(8, 8))
        _, cdx, cdy = vjp_warp(img, d, cot)
        h = 1e-3
        for comp, grad in ((0, cdx), (1, cdy)):
            u = rng.normal(size=(8, 8))
            arrs = [dx.copy(), dy.copy()]
            arrs[comp] = arrs[comp] + h * u
            jvp = (np.sum(cot * warp_image(img, DisplacementField(grid8, *arrs)))
                   - np.sum(cot * warp_image(img, d))) / h
            lhs = np.sum(grad * u)
            assert lhs == pytest.approx(jvp, rel=1e-8, abs=1e-10)

    def test_compose_vjp_fd(self, grid8, rng):
        do = [rng.uniform(-0.5, 0.5, (8, 8)) for _ in range(2)]
        di = [rng.uniform(-0.5, 0.5, (8, 8)) for _ in range(2)]
        ca = rng.normal(size=(8, 8))
        cb = rng.normal(size=(8, 8))
        grads = vjp_compose(do[0], do[1], di[0], di[1], ca, cb)
        all_args = [do[0], do[1], di[0], di[1]]

        def value(args):
            cx, cy = compose(*args)
            return np.sum(ca * cx) + np.sum(cb * cy)

        h = 1e-6
        for slot in range(4):
            for _ in range(6):
                i, j = rng.integers(0, 8, 2)
                ap = [a.copy() for a in all_args]
                am = [a.copy() for a in all_args]
                ap[slot][i, j] += h
                am[slot][i, j] -= h
                fd = (value(ap) - value(am)) / (2 * h)
                assert fd == pytest.approx(grads[slot][i, j], abs=2e-5)


def test_velocity_field_shape_validation(grid16):
    with pytest.raises(ValueError):
        VelocityField(grid16, np.zeros((3, 3)), np.zeros((3, 3)))


def test_displacement_requires_finite(grid8):
    bad = np.zeros((8, 8))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        DisplacementField(grid8, bad, np.zeros((8, 8)))
