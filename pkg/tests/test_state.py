"""Forward solver tests: scheme exactness, linearity, a priori bounds."""

import math

import numpy as np
import pytest

from nashheat.presets import tiny
from nashheat.scenario import Box, PhysicalScenario, to_similarity
from nashheat.state import (
    ControlBundle,
    Discretization,
    TimeGrid,
    estimate_Ci,
    gronwall_report,
    resolvent_Li,
    solve_state,
)
from nashheat.weighted import Field, Grid, inner_K, norm_K, spectral_probe


@pytest.fixture(scope="module")
def disc():
    return tiny().discretize()


def make_disc(a=0.0, b=0.0, n=33, R=6.0, m=8, theta=0.5, T=1.0):
    p = PhysicalScenario(
        dim=1,
        T=T,
        leader_box=Box((-1.5,), (-0.5,)),
        follower_boxes=[Box((0.3,), (0.9,)), Box((1.2,), (1.8,))],
        alpha=[0.01, 0.01],
        a=a,
        b=b,
    )
    sim = to_similarity(p)
    return Discretization(sim, Grid(1, R, n), TimeGrid(sim.S, m, theta))


class TestTimeGrid:
    def test_rejects_tiny_step_count(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 1)

    def test_rejects_explicit_theta(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 8, theta=0.25)


class TestStepping:
    def test_zero_controls_zero_trajectory(self, disc):
        traj = solve_state(disc, ControlBundle(disc))
        assert all(float(np.abs(v).max()) == 0.0 for v in traj.states)

    def test_discrete_eigenmode_is_exact_scalar_recursion(self):
        # with A=B=0 the scheme acts on the discrete ground mode by the
        # scalar theta-recursion with rate (lambda1h - N/2); oracle: run it
        d = make_disc()
        grid = d.grid
        import scipy.linalg

        from nashheat.weighted import _sym_tridiag_1d

        diag, off = _sym_tridiag_1d(grid)
        lam, vecs = scipy.linalg.eigh_tridiagonal(diag, off)
        lam1 = lam[0]
        w = np.zeros(grid.shape)
        w[1:-1] = vecs[:, 0] / np.sqrt(grid.K[1:-1])  # undo the symmetrizing similarity
        w /= norm_K(Field(grid, w))
        states = d.forward(None, v0=w)
        mu = lam1 - 0.5  # generator eigenvalue after the -N/2 shift
        th, ds = d.tg.theta, d.tg.ds
        factor = (1 - (1 - th) * ds * mu) / (1 + th * ds * mu)
        coef = 1.0
        for k in range(d.m):
            coef *= factor
            drift = norm_K(Field(grid, states[k + 1] - coef * w))
            assert drift <= 1e-10

    def test_sampled_ground_state_persists(self):
        # A=B=0: the -N/2 shift cancels lambda1, v(s) = phi1 up to O(dy^2+ds^2)
        d = make_disc(n=65, m=32)
        phi = d.grid.phi1().zero_boundary()
        states = d.forward(None, v0=phi.values)
        drift = norm_K(Field(d.grid, states[-1]) - phi) / norm_K(phi)
        assert drift <= 10 * (d.grid.dy**2 + d.tg.ds**2)

    def test_constant_potential_decay(self):
        # A = c: separable solution v(s) = e^{-cs} phi1 within scheme order
        c = 0.8

        def a_fn(x, t):
            # physical a chosen so that A(y,s) = c exactly
            return c / (1.0 + t) * np.ones(np.asarray(x).shape[:-1])

        d = make_disc(a=a_fn, n=65, m=64)
        phi = d.grid.phi1().zero_boundary()
        states = d.forward(None, v0=phi.values)
        expected = math.exp(-c * d.tg.S)
        got = norm_K(Field(d.grid, states[-1])) / norm_K(phi)
        assert got == pytest.approx(expected, abs=20 * (d.grid.dy**2 + d.tg.ds**2))

    def test_rhs_zero_initial_zero_stays_zero(self, disc):
        out = disc.forward(lambda k: None, record=False)
        assert float(np.abs(out).max()) == 0.0


class TestLinearity:
    def test_superposition(self, disc):
        rng = np.random.default_rng(11)
        bundle = ControlBundle(disc)
        for k in range(disc.m):
            bundle.leader[k] = rng.standard_normal(bundle.leader[k].shape)
            for i in range(disc.n_followers):
                bundle.followers[i][k] = rng.standard_normal(
                    bundle.followers[i][k].shape
                )
        combined = solve_state(disc, bundle).states[-1]
        parts = []
        gb = ControlBundle(disc, leader=[g.copy() for g in bundle.leader])
        parts.append(solve_state(disc, gb).states[-1])
        for i in range(disc.n_followers):
            fb = ControlBundle(disc)
            for k in range(disc.m):
                fb.followers[i][k] = bundle.followers[i][k].copy()
            parts.append(solve_state(disc, fb).states[-1])
        diff = combined - sum(parts)
        assert norm_K(Field(disc.grid, diff)) <= 1e-9

    def test_resolvent_linearity(self, disc):
        rng = np.random.default_rng(12)
        h = [rng.standard_normal(int(m.sum())) for m in disc.follower_masks[0]]
        v1 = resolvent_Li(disc, 0, h)
        v2 = resolvent_Li(disc, 0, [2.0 * x for x in h])
        rel = norm_K(v2 - 2.0 * v1) / max(norm_K(v1), 1e-300)
        assert rel <= 1e-10

    def test_zero_follower_control(self, disc):
        h = [np.zeros(int(m.sum())) for m in disc.follower_masks[0]]
        assert norm_K(resolvent_Li(disc, 0, h)) == 0.0


class TestAPrioriBound:
    def test_gronwall_envelope(self, disc):
        rng = np.random.default_rng(13)
        bundle = ControlBundle(disc)
        for k in range(disc.m):
            bundle.leader[k] = rng.standard_normal(bundle.leader[k].shape)
        traj = solve_state(disc, bundle)
        rhs_norms = [
            norm_K(Field(disc.grid, bundle.rhs_at_step(k))) for k in range(disc.m)
        ]
        rep = gronwall_report(disc, traj, rhs_norms)
        assert rep["satisfied"], rep

    def test_envelope_with_potentials(self):
        d = make_disc(a=0.5, b=0.2, m=16)
        rng = np.random.default_rng(14)
        bundle = ControlBundle(d)
        for k in range(d.m):
            bundle.leader[k] = rng.standard_normal(bundle.leader[k].shape)
        traj = solve_state(d, bundle)
        rhs_norms = [norm_K(Field(d.grid, bundle.rhs_at_step(k))) for k in range(d.m)]
        rep = gronwall_report(d, traj, rhs_norms)
        assert rep["satisfied"], rep


class TestEstimateCi:
    def test_positive_and_scale_invariant(self, disc):
        c = estimate_Ci(disc, 0)
        assert c > 0 and math.isfinite(c)
        # ratio definition: estimate is invariant under control scaling by
        # construction (power iteration normalizes); rerun with other seed
        c2 = estimate_Ci(disc, 0, seed=1)
        assert c2 == pytest.approx(c, rel=0.15)

    def test_monotone_in_horizon(self):
        # same spacing, half the horizon: sup over fewer steps cannot grow
        d_full = make_disc(m=16)
        p = d_full.sim.physical
        sim = to_similarity(p)
        half = Discretization(
            sim_half(sim, 0.5), d_full.grid, TimeGrid(sim.S / 2, 8, 0.5)
        )
        c_half = estimate_Ci(half, 0)
        c_full = estimate_Ci(d_full, 0)
        assert c_half <= c_full * (1 + 1e-6)

    def test_stability_under_refinement(self):
        vals = []
        for n, m in ((33, 8), (65, 16)):
            d = make_disc(n=n, m=m)
            vals.append(estimate_Ci(d, 0))
        assert abs(vals[1] - vals[0]) / vals[0] <= 0.10


def sim_half(sim, factor):
    """Similarity scenario truncated to a fraction of its horizon."""
    import copy

    s2 = copy.copy(sim)
    s2.S = sim.S * factor
    return s2


class TestSchemeOrder:
    @pytest.mark.parametrize("theta,expected", [(0.5, 2.0), (1.0, 1.0)])
    def test_self_convergence_rate(self, theta, expected):
        from nashheat.verify import convergence_study

        sim = to_similarity(
            PhysicalScenario(
                dim=1,
                T=1.0,
                leader_box=Box((-1.5,), (-0.5,)),
                follower_boxes=[Box((0.3,), (0.9,))],
                alpha=[0.01],
            )
        )
        res = convergence_study("time", sim=sim, theta=theta)
        assert res["rate"] == pytest.approx(expected, abs=0.2)
