"""Change-of-variables and scenario validation tests."""

import math

import numpy as np
import pytest

from nashheat.scenario import (
    Box,
    InterpolatedControl,
    PhysicalScenario,
    ScenarioError,
    from_similarity_controls,
    sample_similarity_control,
    to_similarity,
)
from nashheat.weighted import Grid


def make_physical(**kw):
    args = dict(
        dim=1,
        T=math.e - 1.0,
        leader_box=Box((-1.5,), (-0.5,)),
        follower_boxes=[Box((0.3,), (0.9,)), Box((1.2,), (1.8,))],
        alpha=[0.01, 0.01],
    )
    args.update(kw)
    return PhysicalScenario(**args)


class TestValidation:
    def test_rejects_nonpositive_horizon(self):
        with pytest.raises(ScenarioError, match="T"):
            make_physical(T=0.0)

    def test_rejects_negative_alpha(self):
        with pytest.raises(ScenarioError, match=r"alpha\[1\]"):
            make_physical(alpha=[0.01, -1.0])

    def test_to_similarity_rejects_zero_alpha(self):
        p = make_physical(alpha=[0.01, 0.0])
        with pytest.raises(ScenarioError, match=r"alpha\[1\]"):
            to_similarity(p)

    def test_rejects_overlapping_follower_boxes(self):
        with pytest.raises(ScenarioError, match=r"follower_boxes\[1\]"):
            make_physical(follower_boxes=[Box((0.3,), (0.9,)), Box((0.5,), (1.1,))])

    def test_rejects_follower_overlapping_leader(self):
        with pytest.raises(ScenarioError, match=r"follower_boxes\[0\]"):
            make_physical(follower_boxes=[Box((-1.0,), (-0.6,)), Box((1.2,), (1.8,))])

    def test_rejects_inverted_box(self):
        with pytest.raises(ScenarioError, match="leader_box"):
            make_physical(leader_box=Box((0.5,), (-0.5,)))


class TestChangeOfVariables:
    def test_zero_potentials_horizon(self):
        # a = b = 0, T = e - 1  =>  A = B = 0, S = 1
        p = make_physical()
        sim = to_similarity(p)
        assert sim.S == pytest.approx(1.0, abs=1e-14)
        pts = np.linspace(-2, 2, 7).reshape(-1, 1)
        assert np.all(sim.A(pts, 0.5) == 0.0)
        assert np.all(sim.B(pts, 0.5) == 0.0)

    def test_constant_potential_transform(self):
        # A(y,s) = e^s a(e^{s/2} y, e^s - 1) for constant a
        c = 0.7
        sim = to_similarity(make_physical(a=c))
        pts = np.array([[0.3], [-1.2]])
        for s in (0.0, 0.4, 1.0):
            np.testing.assert_allclose(sim.A(pts, s), math.exp(s) * c, rtol=1e-14)

    def test_vector_potential_transform(self):
        c = -0.25
        sim = to_similarity(make_physical(b=c))
        pts = np.array([[0.3], [-1.2]])
        for s in (0.0, 0.5):
            np.testing.assert_allclose(
                sim.B(pts, s), math.exp(s / 2.0) * c, rtol=1e-14
            )

    def test_target_scaling(self):
        T = 3.0
        sim = to_similarity(make_physical(T=T, target=lambda pts: pts[:, 0] ** 2))
        y = np.array([[0.5]])
        # v^S(y) = (1+T)^{N/2} u^T(sqrt(1+T) y)
        expected = (1 + T) ** 0.5 * ((1 + T) ** 0.5 * 0.5) ** 2
        assert sim.target_vS(y)[0] == pytest.approx(expected, rel=1e-14)

    def test_region_scaling(self):
        sim = to_similarity(make_physical(T=1.0))
        s = 0.5
        box = sim.follower_box_at(0, s)
        f = math.exp(-s / 2)
        assert box.lo[0] == pytest.approx(0.3 * f)
        assert box.hi[0] == pytest.approx(0.9 * f)

    def test_scaled_regions_stay_disjoint(self):
        sim = to_similarity(make_physical(T=1.0))
        for s in np.linspace(0, sim.S, 9):
            boxes = [sim.follower_box_at(i, float(s)) for i in range(2)]
            assert boxes[0].disjoint(boxes[1])


class TestJacobians:
    def test_identity_at_zero(self):
        sim = to_similarity(make_physical(T=1.0))
        assert sim.jacobian_ys(0.0) == pytest.approx(1.0, abs=1e-15)

    def test_n2_value_at_log2(self):
        # N=2, s = S = log 2: D_ys = e^{S(N+2)/2} = 2^2 = 4
        p = PhysicalScenario(
            dim=2,
            T=1.0,
            leader_box=Box((-1.5, -1.5), (-0.5, -0.5)),
            follower_boxes=[Box((0.3, 0.3), (0.9, 0.9))],
            alpha=[0.01],
        )
        sim = to_similarity(p)
        assert sim.jacobian_ys(sim.S) == pytest.approx(4.0, rel=1e-14)

    def test_dy_value(self):
        # N=1, T=3: D_y = (1+T)^{1/2} = 2
        sim = to_similarity(make_physical(T=3.0))
        assert sim.jacobian_y() == pytest.approx(2.0, rel=1e-14)

    def test_finite_difference_jacobian_oracle(self):
        # |D_ys| must equal the FD determinant of (y,s) -> (e^{s/2} y, e^s - 1)
        sim = to_similarity(make_physical(T=1.0))
        eps = 1e-6

        def mapping(y, s):
            return np.array([math.exp(s / 2) * y, math.exp(s) - 1.0])

        for s in (0.1, 0.4, 0.6):
            for y in (-1.0, 0.7):
                J = np.zeros((2, 2))
                J[:, 0] = (mapping(y + eps, s) - mapping(y - eps, s)) / (2 * eps)
                J[:, 1] = (mapping(y, s + eps) - mapping(y, s - eps)) / (2 * eps)
                det = abs(np.linalg.det(J))
                assert sim.jacobian_ys(s) == pytest.approx(det, rel=1e-7)

    def test_bounds_hold_on_time_scan(self):
        sim = to_similarity(make_physical(T=2.0))
        for s in np.linspace(0.0, sim.S, 33):
            d = sim.jacobian_ys(float(s))
            assert sim.k1 <= d <= sim.k2 * (1 + 1e-14)
        assert sim.k3 <= sim.jacobian_y() <= sim.k4

    def test_rejects_time_outside_interval(self):
        sim = to_similarity(make_physical(T=1.0))
        with pytest.raises(ScenarioError, match="s"):
            sim.jacobian_ys(sim.S + 0.1)
        with pytest.raises(ScenarioError, match="s"):
            sim.jacobian_ys(-0.1)


class TestControlRoundTrip:
    def test_zero_maps_to_zero(self):
        p = make_physical(T=1.0)
        grid = Grid(1, 6.0, 33)
        times = np.linspace(0, math.log(2.0), 9)
        g = InterpolatedControl(grid, times, [np.zeros(grid.shape)] * 8)
        f, w = from_similarity_controls(g, [g, g], p)
        x = np.array([[0.4], [-0.3]])
        assert np.all(f(x, 0.5) == 0.0)

    def test_constant_control_pullback(self):
        # g = 1, N = 1  =>  f(x,t) = (1+t)^{-3/2}
        p = make_physical(T=1.0)
        grid = Grid(1, 6.0, 33)
        times = np.linspace(0, math.log(2.0), 9)
        g = InterpolatedControl(grid, times, [np.ones(grid.shape)] * 8)
        f, _ = from_similarity_controls(g, [g, g], p)
        for t in (0.0, 0.3, 0.9):
            vals = f(np.array([[0.2]]), t)
            assert vals[0] == pytest.approx((1 + t) ** -1.5, rel=1e-12)

    def test_rejects_mismatched_horizon(self):
        p = make_physical(T=1.0)
        grid = Grid(1, 6.0, 33)
        times = np.linspace(0, 0.9, 9)  # wrong S
        g = InterpolatedControl(grid, times, [np.zeros(grid.shape)] * 8)
        with pytest.raises(ScenarioError, match="horizon"):
            from_similarity_controls(g, [], p)

    def test_round_trip_identity_at_nodes(self):
        # (mv1) after (mv2) reproduces the similarity control at grid nodes
        p = make_physical(T=1.0)
        grid = Grid(1, 6.0, 33)
        m = 8
        times = np.linspace(0, math.log(2.0), m + 1)
        rng = np.random.default_rng(5)
        steps = [
            np.exp(-grid.axis**2 / 3) * rng.uniform(0.5, 1.5) for _ in range(m)
        ]
        g = InterpolatedControl(grid, times, steps)
        f, _ = from_similarity_controls(g, [g, g], p)
        g_back = sample_similarity_control(f, grid, times, dim=1)
        for k in range(m):
            np.testing.assert_allclose(
                g_back.step_values[k], steps[k], rtol=1e-10, atol=1e-12
            )

    def test_round_trip_on_potentials(self):
        # a -> A -> pull back a at matched points
        a_fn = lambda x, t: 0.3 * np.exp(-np.asarray(x)[:, 0] ** 2) * (1 + t)
        p = make_physical(T=1.0, a=a_fn)
        sim = to_similarity(p)
        for s in (0.0, 0.3, 0.6):
            y = np.array([[0.5], [-0.7]])
            x = math.exp(s / 2) * y
            t = math.exp(s) - 1.0
            # a(x,t) = (1+t)^{-1} A(x/sqrt(1+t), log(1+t))
            back = (1 + t) ** -1.0 * sim.A(x / math.sqrt(1 + t), math.log(1 + t))
            np.testing.assert_allclose(back, a_fn(x, t), rtol=1e-12)


class TestLocalizers:
    def test_rho_is_one_on_final_region(self):
        sim = to_similarity(make_physical(T=1.0))
        grid = Grid(1, 6.0, 129)
        rho = sim.rho(0, grid)
        box = sim.follower_box_at(0, sim.S)
        inside = box.contains(grid.points).reshape(grid.shape)
        assert np.all(rho.values[inside] == 1.0)
        assert np.all(rho.values >= 0.0)
        assert np.all(rho.values <= 1.0)

    def test_sharp_indicator_with_zero_margin(self):
        sim = to_similarity(make_physical(T=1.0, rho_margin=0.0))
        grid = Grid(1, 6.0, 129)
        rho = sim.rho(0, grid)
        assert set(np.unique(rho.values)) <= {0.0, 1.0}
