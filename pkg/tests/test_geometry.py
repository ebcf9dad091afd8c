import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from exitlab import geometry as geo


@pytest.fixture(scope="module")
def ball3():
    return geo.DomainModel.ball(3)


@pytest.fixture(scope="module")
def ball4():
    return geo.DomainModel.ball(4)


class TestDomainModel:
    def test_level_radii_nested(self, ball3):
        radii = [ball3.level_radius(k) for k in range(ball3.n_levels)] + [ball3.radius]
        assert all(a < b for a, b in zip(radii, radii[1:]))

    def test_half_space_cap_must_clear_hyperplane(self):
        with pytest.raises(geo.DomainError):
            geo.DomainModel.half_space_cap(3, height=0.4, radius=0.5)

    def test_bad_fractions_rejected(self):
        with pytest.raises(geo.DomainError):
            geo.DomainModel.ball(3, nested_fractions=(0.5, 0.5))

    def test_dimension_limits(self):
        with pytest.raises(geo.DomainError):
            geo.DomainModel.ball(2)
        with pytest.raises(geo.DomainError):
            geo.DomainModel.ball(7)


class TestExpectedExitTime:
    def test_center_d3(self, ball3):
        assert geo.expected_exit_time(ball3, np.zeros(3)) == pytest.approx(1 / 3)

    def test_vanishes_at_boundary(self, ball3):
        x = np.array([0.999999, 0.0, 0.0])
        assert geo.expected_exit_time(ball3, x) < 1e-5

    def test_scaling_radius_doubles(self):
        small = geo.DomainModel.ball(4, radius=1.0)
        big = geo.DomainModel.ball(4, radius=2.0)
        assert geo.expected_exit_time(big, np.zeros(4)) == pytest.approx(
            4.0 * geo.expected_exit_time(small, np.zeros(4))
        )


class TestGreenFunction:
    def test_symmetry(self, ball4):
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = rng.uniform(-0.4, 0.4, 4)
            y = rng.uniform(-0.4, 0.4, 4)
            if np.allclose(x, y):
                continue
            assert geo.green_function(ball4, x, y) == pytest.approx(
                geo.green_function(ball4, y, x), rel=1e-10
            )

    def test_diagonal_is_infinite(self, ball3):
        x = np.array([0.2, 0.1, 0.0])
        assert math.isinf(geo.green_function(ball3, x, x))

    def test_vanishes_at_boundary(self, ball3):
        x = np.zeros(3)
        vals = [
            geo.green_function(ball3, x, np.array([r, 0.0, 0.0]))
            for r in (0.9, 0.99, 0.999)
        ]
        assert vals[0] > vals[1] > vals[2]
        assert vals[2] < 1e-2

    def test_exterior_rejected(self, ball3):
        with pytest.raises(geo.DomainError):
            geo.green_function(ball3, np.zeros(3), np.array([1.5, 0, 0]))

    def test_occupation_normalization_d3(self, ball3):
        # integral over the ball of G(0, y) dy must equal E_0 tau = 1/3;
        # radial reduction: G(0,y) = (1/(2 pi))(1/r - 1), surface 4 pi r^2.
        val, _ = quad(lambda r: 4 * math.pi * r * r * geo.green_function(ball3, np.zeros(3), np.array([r, 0, 0])), 1e-9, 1 - 1e-12)
        assert val == pytest.approx(1 / 3, rel=1e-6)

    def test_occupation_normalization_offcenter_d4(self, ball4):
        # integral G(x, y) dy = E_x tau via monte-carlo quadrature over the ball
        rng = np.random.default_rng(11)
        x = np.array([0.3, 0.0, -0.2, 0.1])
        n = 400_000
        pts = rng.normal(size=(n, 4))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        pts *= rng.uniform(0, 1, (n, 1)) ** 0.25
        vol = math.pi ** 2 / 2
        vals = np.array([geo.green_function(ball4, x, p) for p in pts[:40_000]])
        est = vals.mean() * vol
        se = vals.std(ddof=1) / math.sqrt(len(vals)) * vol
        assert abs(est - geo.expected_exit_time(ball4, x)) < 4 * se + 1e-4


class TestMartinKernel:
    def test_normalized_at_base(self, ball4):
        x0 = np.zeros(4)
        z = np.array([0, 0, 0, 1.0])
        for y in (x0, np.array([0.3, 0.2, 0, 0])):
            pass
        assert geo.martin_kernel(ball4, x0, x0, z) == pytest.approx(1.0)

    def test_pole_blowup_and_boundary_vanishing(self, ball3):
        x0 = np.zeros(3)
        z = np.array([1.0, 0, 0])
        toward = geo.martin_kernel(ball3, x0, np.array([0.95, 0, 0]), z)
        away = geo.martin_kernel(ball3, x0, np.array([-0.95, 0, 0]), z)
        assert toward > 100 * away
        assert away < 0.05

    def test_harmonicity_sphere_mean(self, ball4):
        # mean over a small sphere equals the center value
        rng = np.random.default_rng(3)
        x0 = np.zeros(4)
        z = np.array([1.0, 0, 0, 0])
        y = np.array([0.35, -0.1, 0.2, 0.05])
        r = 0.05
        dirs = rng.normal(size=(40_000, 4))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        vals = [geo.martin_kernel(ball4, x0, y + r * u, z) for u in dirs[:8000]]
        mean = np.mean(vals)
        se = np.std(vals, ddof=1) / math.sqrt(len(vals))
        assert abs(mean - geo.martin_kernel(ball4, x0, y, z)) < 4 * se + 1e-4

    def test_gradient_matches_finite_differences(self, ball4):
        x0 = np.zeros(4)
        z = np.array([0, 1.0, 0, 0])
        y = np.array([0.25, -0.3, 0.1, 0.4])
        grad = geo.martin_kernel_gradient(ball4, x0, y, z)
        h = 1e-6
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            fd = (geo.martin_kernel(ball4, x0, y + e, z) - geo.martin_kernel(ball4, x0, y - e, z)) / (2 * h)
            assert fd == pytest.approx(grad[j], rel=1e-4)


class TestHarmonicMeasureCap:
    @pytest.mark.parametrize("d", [3, 4, 5, 6])
    def test_full_sphere_is_one(self, d):
        dom = geo.DomainModel.ball(d)
        target = geo.BoundaryTarget((1.0,) + (0.0,) * (d - 1), eps=2.0)
        x = np.zeros(d)
        x[1] = 0.35
        assert geo.harmonic_measure_cap(dom, x, target) == pytest.approx(1.0, abs=1e-8)

    def test_center_gives_surface_fraction(self, ball3):
        target = geo.BoundaryTarget((0, 0, 1.0), eps=0.5)
        theta = geo.cap_polar_angle(ball3, 0.5)
        frac = quad(lambda t: math.sin(t), 0, theta)[0] / 2.0
        assert geo.harmonic_measure_cap(ball3, np.zeros(3), target) == pytest.approx(frac, rel=1e-8)

    def test_monotone_in_eps_and_vanishing(self, ball4):
        x = np.array([0.2, 0.1, 0.0, -0.3])
        target = lambda e: geo.BoundaryTarget((0, 0, 0, 1.0), eps=e)
        vals = [geo.harmonic_measure_cap(ball4, x, target(e)) for e in (0.4, 0.2, 0.1, 0.05)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-3

    def test_small_cap_scaling_d4(self, ball4):
        # m(eps) ~ eps^{d-1}: ratio across dyadic eps within 10%
        x = np.array([0.25, 0.0, 0.1, 0.0])
        t1 = geo.BoundaryTarget((0, 0, 0, 1.0), eps=0.1)
        t2 = geo.BoundaryTarget((0, 0, 0, 1.0), eps=0.05)
        m1 = geo.harmonic_measure_cap(ball4, x, t1)
        m2 = geo.harmonic_measure_cap(ball4, x, t2)
        assert m1 / m2 == pytest.approx(2 ** 3, rel=0.10)


class TestSampleExitPoint:
    def test_points_on_sphere(self, ball4):
        pts = geo.sample_exit_point(ball4, np.array([0.3, 0.2, -0.1, 0.0]), 2000, master_seed=1)
        radii = np.linalg.norm(pts, axis=1)
        assert np.allclose(radii, 1.0, atol=1e-10)

    def test_center_start_uniform_angles(self, ball3):
        pts = geo.sample_exit_point(ball3, np.zeros(3), 40_000, master_seed=2)
        # first coordinate of a uniform point on S^2 is uniform on [-1, 1]
        ks = stats.kstest(pts[:, 0], stats.uniform(loc=-1, scale=2).cdf)
        assert ks.pvalue > 1e-3

    def test_cap_frequencies_match_quadrature(self, ball4):
        x = np.array([0.45, -0.15, 0.2, 0.0])
        n = 100_000
        pts = geo.sample_exit_point(ball4, x, n, master_seed=3)
        rng = np.random.default_rng(17)
        for trial in range(6):
            zdir = rng.normal(size=4)
            zdir /= np.linalg.norm(zdir)
            target = geo.BoundaryTarget(tuple(zdir), eps=float(rng.uniform(0.25, 0.9)))
            m = geo.harmonic_measure_cap(ball4, x, target)
            freq = geo.cap_indicator(ball4, pts, target).mean()
            se = math.sqrt(max(m * (1 - m), 1e-12) / n)
            assert abs(freq - m) < 3.5 * se, (trial, freq, m)

    def test_mean_of_harmonic_function_is_value(self, ball3):
        # phi = first coordinate is harmonic: E phi(exit) = phi(x)
        x = np.array([0.3, -0.2, 0.55])
        pts = geo.sample_exit_point(ball3, x, 200_000, master_seed=4)
        est = pts[:, 0].mean()
        se = pts[:, 0].std(ddof=1) / math.sqrt(len(pts))
        assert abs(est - x[0]) < 3.5 * se


class TestPoissonKernel:
    def test_integrates_to_one_via_cap(self, ball3):
        # consistency: poisson kernel at center equals inverse sphere area
        val = geo.poisson_kernel(ball3, np.zeros(3), np.array([0, 0, 1.0]))
        assert val == pytest.approx(1.0 / geo.sphere_area(3), rel=1e-12)
