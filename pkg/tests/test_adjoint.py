"""Discrete adjoint tests: transposition identities, leader system."""

import math

import numpy as np
import pytest

from nashheat.adjoint import (
    adjoint_of_Li,
    nash_terminal,
    solve_adjoint,
    solve_leader_adjoint,
)
from nashheat.presets import tiny
from nashheat.scenario import Box, PhysicalScenario, to_similarity
from nashheat.state import (
    ControlBundle,
    Discretization,
    TimeGrid,
    follower_inner,
    resolvent_Li,
)
from nashheat.verify import random_smooth_field
from nashheat.weighted import Field, Grid, inner_K, norm_K


@pytest.fixture(scope="module")
def disc():
    return tiny().discretize()


def make_disc_with_drift(n=33, m=8):
    p = PhysicalScenario(
        dim=1,
        T=1.0,
        leader_box=Box((-1.5,), (-0.5,)),
        follower_boxes=[Box((0.3,), (0.9,)), Box((1.2,), (1.8,))],
        alpha=[0.01, 0.01],
        a=lambda x, t: 0.3 * np.exp(-np.asarray(x)[:, 0] ** 2),
        b=0.15,
    )
    sim = to_similarity(p)
    return Discretization(sim, Grid(1, 6.0, n), TimeGrid(sim.S, m, 0.5))


class TestTransposition:
    def test_zero_terminal(self, disc):
        adj = solve_adjoint(disc, disc.grid.zero_field())
        assert all(float(np.abs(p).max()) == 0.0 for p in adj.steps)

    def test_duality_identity_random_pairs(self, disc):
        # sum_k ds <F^k, p^k>_K == <xi, v^m>_K for random sources/terminals
        rng = np.random.default_rng(21)
        for _ in range(10):
            F = [random_smooth_field(disc.grid, rng).values for _ in range(disc.m)]
            xi = random_smooth_field(disc.grid, rng)
            vm = disc.forward(lambda k: F[k], record=False)
            lhs = float(np.sum(disc.grid.quad_K * xi.values * vm))
            adj = solve_adjoint(disc, xi)
            rhs = disc.tg.ds * sum(
                float(np.sum(disc.grid.quad_K * F[k] * adj.steps[k]))
                for k in range(disc.m)
            )
            scale = norm_K(xi) * math.sqrt(
                sum(norm_K(Field(disc.grid, f)) ** 2 for f in F) * disc.tg.ds
            )
            assert abs(lhs - rhs) <= 1e-10 * scale

    def test_duality_with_potentials(self):
        # transposes remain exact when A, B are nonzero (advection included)
        d = make_disc_with_drift()
        rng = np.random.default_rng(22)
        F = [random_smooth_field(d.grid, rng).values for _ in range(d.m)]
        xi = random_smooth_field(d.grid, rng)
        vm = d.forward(lambda k: F[k], record=False)
        lhs = float(np.sum(d.grid.quad_K * xi.values * vm))
        adj = solve_adjoint(d, xi)
        rhs = d.tg.ds * sum(
            float(np.sum(d.grid.quad_K * F[k] * adj.steps[k])) for k in range(d.m)
        )
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)

    def test_adjoint_eigenmode_constant(self, disc):
        # A=B=0, terminal = discrete ground mode: p constant in s up to the
        # scalar theta-recursion of the (lambda1h - N/2) shift
        import scipy.linalg

        from nashheat.weighted import _sym_tridiag_1d

        grid = disc.grid
        diag, off = _sym_tridiag_1d(grid)
        lam, vecs = scipy.linalg.eigh_tridiagonal(diag, off)
        w = np.zeros(grid.shape)
        w[1:-1] = vecs[:, 0] / np.sqrt(grid.K[1:-1])
        w /= norm_K(Field(grid, w))
        adj = solve_adjoint(disc, w)
        mu = lam[0] - 0.5
        th, ds = disc.tg.theta, disc.tg.ds
        # dual recursion: p^k = (prod of step factors applied transposed) w
        coef = 1.0 / (1 + th * ds * mu)
        for k in range(disc.m - 1, -1, -1):
            drift = norm_K(Field(grid, adj.steps[k] - coef * w))
            assert drift <= 1e-10
            coef *= (1 - (1 - th) * ds * mu) / (1 + th * ds * mu)

    def test_sampled_phi1_nearly_constant(self, disc):
        phi = disc.grid.phi1().zero_boundary()
        adj = solve_adjoint(disc, phi)
        drift = norm_K(Field(disc.grid, adj.steps[0]) - phi) / norm_K(phi)
        assert drift <= 10 * (disc.grid.dy**2 + disc.tg.ds**2)

    def test_transposition_bound_stable(self):
        # |p|_{L2(0,S;L2(K))} <= C |xi|_{L2(K)} with C stable in refinement
        consts = []
        for n, m in ((33, 8), (65, 16)):
            p = tiny().scenario
            sim = to_similarity(p)
            d = Discretization(sim, Grid(1, 6.0, n), TimeGrid(sim.S, m, 0.5))
            rng = np.random.default_rng(23)
            worst = 0.0
            for _ in range(10):
                xi = random_smooth_field(d.grid, rng)
                adj = solve_adjoint(d, xi)
                worst = max(worst, adj.time_L2K_norm() / norm_K(xi))
            consts.append(worst)
        assert abs(consts[1] - consts[0]) <= 0.2 * consts[0]


class TestAdjointOfLi:
    def test_zero(self, disc):
        out = adjoint_of_Li(disc, 0, disc.grid.zero_field())
        assert all(float(np.abs(p).max()) == 0.0 for p in out)

    def test_pairing_random(self, disc):
        rng = np.random.default_rng(24)
        for i in range(disc.n_followers):
            for _ in range(5):
                h = [
                    rng.standard_normal(int(mk.sum()))
                    for mk in disc.follower_masks[i]
                ]
                xi = random_smooth_field(disc.grid, rng)
                lhs = inner_K(resolvent_Li(disc, i, h), xi)
                gathered = adjoint_of_Li(disc, i, xi)
                rhs = disc.tg.ds * sum(
                    float(
                        np.sum(
                            disc.mask_weights(disc.follower_masks[i][k])
                            * h[k]
                            * gathered[k]
                        )
                    )
                    for k in range(disc.m)
                )
                hnorm = math.sqrt(follower_inner(disc, i, h, h))
                assert abs(lhs - rhs) <= 1e-10 * hnorm * norm_K(xi)

    def test_dense_transpose_identity(self, disc):
        from nashheat.verify import assemble_dense

        dense = assemble_dense(disc)
        for i in range(disc.n_followers):
            gap = float(np.abs(dense.Li_star[i] - dense.Li[i].T).max())
            scale = float(np.abs(dense.Li[i]).max())
            assert gap <= 1e-10 * max(scale, 1.0)


class TestContinuousFormConsistency:
    def test_transpose_matches_continuous_adjoint_stencil(self):
        # the K-transpose of (A + B.grad - N/2) should discretize
        # A - div(B .) - y.B/2 - N/2 to second order on smooth fields
        d = make_disc_with_drift(n=129)
        grid = d.grid
        node = 4  # some interior time node
        rng = np.random.default_rng(25)
        w = random_smooth_field(grid, rng)
        got = d.apply_M(node, w.values, adjoint=True)

        y = grid.points[:, 0]
        s = float(d.tg.times[node])
        B = np.asarray(d.sim.B(grid.points, s))[:, 0]
        A = np.asarray(d.sim.A(grid.points, s))
        from nashheat.weighted import apply_L_array

        Lw = apply_L_array(grid, w.values)
        # continuous adjoint: Lw + A w - div(B w) - (y.B/2) w - (N/2) w
        Bw = (B * w.values.ravel()).reshape(grid.shape)
        divBw = np.zeros(grid.shape)
        divBw[1:-1] = (Bw[2:] - Bw[:-2]) / (2 * grid.dy)
        expected = (
            Lw
            + (A * w.values.ravel()).reshape(grid.shape)
            - divBw
            - (0.5 * y * B * w.values.ravel()).reshape(grid.shape)
            - 0.5 * w.values
        )
        expected[~grid.interior_mask] = 0.0
        err = norm_K(Field(grid, got - expected)) / norm_K(w)
        assert err <= 50 * grid.dy**2


class TestLeaderAdjoint:
    def test_zero_coupling(self, disc):
        pair = solve_leader_adjoint(disc, disc.grid.zero_field())
        assert norm_K(Field(disc.grid, pair.coupling)) == 0.0
        assert all(float(np.abs(p).max()) == 0.0 for p in pair.phi.steps)

    def test_no_followers_reduces_to_plain_adjoint(self):
        p = PhysicalScenario(
            dim=1,
            T=1.0,
            leader_box=Box((-1.5,), (-0.5,)),
            follower_boxes=[],
            alpha=[],
        )
        sim = to_similarity(p)
        d = Discretization(sim, Grid(1, 6.0, 33), TimeGrid(sim.S, 8, 0.5))
        rng = np.random.default_rng(26)
        zeta = random_smooth_field(d.grid, rng)
        pair = solve_leader_adjoint(d, zeta)
        plain = solve_adjoint(d, zeta)
        for k in range(d.m):
            assert np.allclose(pair.phi.steps[k], plain.steps[k], atol=1e-13)

    def test_terminal_coupling_invariant(self, disc):
        rng = np.random.default_rng(27)
        zeta = random_smooth_field(disc.grid, rng)
        pair = solve_leader_adjoint(disc, zeta, tol=1e-10)
        assert pair.terminal_defect() <= 1e-9 * max(norm_K(zeta), 1.0)

    def test_duality_identity_with_nash_responses(self, disc):
        # <zeta, v(S; g, h(g))> = sum_k ds <phi^k, g^k> on the leader masks,
        # with v^S = 0 (linear part of the reduced map)
        from nashheat.leader import LeaderProblem, LeaderSolver

        rng = np.random.default_rng(28)
        solver = LeaderSolver(LeaderProblem(disc, eps=1.0))
        zeta = random_smooth_field(disc.grid, rng)
        g = [rng.standard_normal(int(mk.sum())) for mk in disc.leader_masks]
        vS = solver.reduced_final(g, affine_part=True)
        lhs = float(np.sum(disc.grid.quad_K * zeta.values * vS))
        phi_mask = solver.adjoint_apply(zeta.values)
        rhs = disc.tg.ds * sum(
            float(
                np.sum(disc.mask_weights(disc.leader_masks[k]) * phi_mask[k] * g[k])
            )
            for k in range(disc.m)
        )
        assert abs(lhs - rhs) <= 1e-7 * max(abs(lhs), 1e-6)
