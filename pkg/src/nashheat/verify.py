"""Independent oracles: dense assembly, brute-force Nash, inequality suite.

Dense instances are small enough (state <= 64 nodes, <= 8 steps, <= 3
followers) that every operator can be materialized column by column and
every identity checked against explicit linear algebra: the adjoint
matrices must be exact transposes in the weighted coordinates, the Nash
operator must match its block formula built from the resolvent matrices,
and the reduced leader map must match the dense KKT chain
L0 - F Lfrak^{-1} T L0.  The inequality suite exercises the weighted
Poincare and moment inequalities and the L^2(K) -> L^1 embedding on
random smooth bump fields.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .adjoint import adjoint_of_Li
from .nash import NashOperator
from .state import ControlBundle, Discretization, resolvent_Li
from .weighted import (
    Field,
    Grid,
    apply_L,
    check_poincare,
    grad_inner,
    inner_K,
    norm_K,
    spectral_probe,
)

DENSE_STATE_LIMIT = 64
DENSE_STEP_LIMIT = 8
DENSE_FOLLOWER_LIMIT = 3


class DenseLimitError(ValueError):
    """Instance exceeds the dense-oracle ceiling."""


def random_smooth_field(grid: Grid, rng: np.random.Generator, max_bumps: int = 5) -> Field:
    """Sum of <= max_bumps Gaussian bumps, decaying inside the truncation.

    Centers in [-R/2, R/2]^N, widths in [0.5, 2]; boundary values zeroed
    so the sample lies in the discrete solution space.
    """
    vals = np.zeros(grid.size)
    pts = grid.points
    for _ in range(int(rng.integers(1, max_bumps + 1))):
        c = rng.uniform(-grid.R / 2, grid.R / 2, grid.dim)
        w = rng.uniform(0.5, 2.0)
        amp = rng.uniform(-2.0, 2.0)
        vals += amp * np.exp(-np.sum((pts - c) ** 2, axis=1) / (2 * w * w))
    return Field(grid, vals.reshape(grid.shape)).zero_boundary()


# -- dense instance ------------------------------------------------------------


@dataclass
class DenseInstance:
    """Explicit matrices of every operator on a tiny instance.

    All matrices act between quadrature-weighted (orthonormal) coordinate
    systems, so adjointness is literal matrix transposition.
    """

    disc: Discretization
    op: NashOperator
    state_sqrtw: np.ndarray
    L0: np.ndarray
    Li: list
    Li_star: list
    L_frak: np.ndarray
    leader_sqrtw: list

    # -- coordinate maps ---------------------------------------------------

    def pack_state(self, values: np.ndarray) -> np.ndarray:
        return self.state_sqrtw * values.ravel()

    def unpack_state(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        np.divide(x, self.state_sqrtw, out=out, where=self.state_sqrtw > 0)
        return out.reshape(self.disc.grid.shape)

    def pack_leader(self, g_steps) -> np.ndarray:
        return np.concatenate(
            [self.leader_sqrtw[k] * np.asarray(g_steps[k], float) for k in range(self.disc.m)]
        )

    def unpack_leader(self, x: np.ndarray) -> list:
        out = []
        off = 0
        for k in range(self.disc.m):
            w = self.leader_sqrtw[k]
            vals = np.zeros(w.shape)
            np.divide(x[off : off + w.size], w, out=vals, where=w > 0)
            out.append(vals)
            off += w.size
        return out

    def rho_diag(self, i: int) -> np.ndarray:
        """Diagonal of multiplication by rho_i^2 |D_y| in state coordinates."""
        return (self.disc.rho_sq[i] * self.disc.Dy).ravel()

    # -- derived dense operators --------------------------------------------

    def L_frak_blocks(self) -> np.ndarray:
        """Nash operator from the block formula d_k I + alpha_i Li* D_i Lj.

        Independent of the column-by-column assembly of ``L_frak``.
        """
        d = self.disc
        n = d.n_followers
        blocks = [[None] * n for _ in range(n)]
        for i in range(n):
            Ti = d.sim.alpha[i] * self.Li_star[i] * self.rho_diag(i)[None, :]
            for j in range(n):
                blocks[i][j] = Ti @ self.Li[j]
            dk_diag = self._dk_diagonal(i)
            blocks[i][i] = blocks[i][i] + np.diag(dk_diag)
        return np.block(blocks)

    def _dk_diagonal(self, i: int) -> np.ndarray:
        d = self.disc
        out = []
        for k in range(d.m):
            out.append(np.full(int(d.follower_masks[i][k].sum()), d.d[k]))
        return np.concatenate(out) if out else np.zeros(0)

    def xi_dense(self, g_steps=None) -> np.ndarray:
        """Right-hand side built purely from the stored matrices."""
        d = self.disc
        vS = self.pack_state(d.vS.values)
        zS = self.L0 @ self.pack_leader(g_steps) if g_steps is not None else 0.0
        eta = vS - zS
        parts = [
            d.sim.alpha[i] * (self.Li_star[i] @ (self.rho_diag(i) * eta))
            for i in range(d.n_followers)
        ]
        return np.concatenate(parts) if parts else np.zeros(0)

    def reduced_dense(self) -> np.ndarray:
        """Linear part of the reduced leader map: L0 - F Lfrak^{-1} T L0."""
        d = self.disc
        n = d.n_followers
        if n == 0:
            return self.L0.copy()
        F = np.hstack(self.Li)
        T = np.vstack(
            [d.sim.alpha[i] * (self.Li_star[i] * self.rho_diag(i)[None, :]) for i in range(n)]
        )
        return self.L0 - F @ np.linalg.solve(self.L_frak, T @ self.L0)

    def symmetrized_spectrum(self) -> np.ndarray:
        sym = 0.5 * (self.L_frak + self.L_frak.T)
        return np.sort(scipy.linalg.eigvalsh(sym))


def assemble_dense(disc: Discretization) -> DenseInstance:
    """Materialize L0, Li, Li*, Lfrak by matrix-free basis application."""
    grid = disc.grid
    if grid.size > DENSE_STATE_LIMIT:
        raise DenseLimitError(
            f"state dimension {grid.size} exceeds dense limit {DENSE_STATE_LIMIT}"
        )
    if disc.m > DENSE_STEP_LIMIT:
        raise DenseLimitError(f"{disc.m} time steps exceed dense limit {DENSE_STEP_LIMIT}")
    if disc.n_followers > DENSE_FOLLOWER_LIMIT:
        raise DenseLimitError(
            f"{disc.n_followers} followers exceed dense limit {DENSE_FOLLOWER_LIMIT}"
        )

    op = NashOperator(disc)
    state_sqrtw = np.sqrt(grid.quad_K.ravel())
    leader_sqrtw = [
        np.sqrt(disc.mask_weights(disc.leader_masks[k]) * disc.tg.ds)
        for k in range(disc.m)
    ]
    leader_dim = int(sum(w.size for w in leader_sqrtw))

    def unpack_leader(x):
        out = []
        off = 0
        for k in range(disc.m):
            w = leader_sqrtw[k]
            vals = np.zeros(w.shape)
            np.divide(x[off : off + w.size], w, out=vals, where=w > 0)
            out.append(vals)
            off += w.size
        return out

    # L0: leader -> final state
    L0 = np.zeros((grid.size, leader_dim))
    for c in range(leader_dim):
        e = np.zeros(leader_dim)
        e[c] = 1.0
        g = unpack_leader(e)
        final = disc.forward(
            lambda k: disc.scatter(disc.leader_masks[k], g[k]), record=False
        )
        L0[:, c] = state_sqrtw * final.ravel()

    Li = []
    Li_star = []
    for i in range(disc.n_followers):
        sl = op.follower_slice(i)
        dim_i = sl.stop - sl.start
        Mi = np.zeros((grid.size, dim_i))
        for c in range(dim_i):
            e = np.zeros(op.dim)
            e[sl.start + c] = 1.0
            h = op.unpack(e)
            final = resolvent_Li(disc, i, h[i]).values
            Mi[:, c] = state_sqrtw * final.ravel()
        Li.append(Mi)
        # adjoint by matrix-free application to state basis vectors
        Si = np.zeros((dim_i, grid.size))
        for c in range(grid.size):
            xi_vals = np.zeros(grid.size)
            if state_sqrtw[c] > 0:
                xi_vals[c] = 1.0 / state_sqrtw[c]
            gathered = adjoint_of_Li(disc, i, xi_vals.reshape(grid.shape))
            bundle_steps = []
            for j in range(disc.n_followers):
                if j == i:
                    bundle_steps.append(gathered)
                else:
                    bundle_steps.append(
                        [np.zeros(int(mk.sum())) for mk in disc.follower_masks[j]]
                    )
            Si[:, c] = op.pack(bundle_steps)[sl]
        Li_star.append(Si)

    L_frak = np.zeros((op.dim, op.dim))
    for c in range(op.dim):
        e = np.zeros(op.dim)
        e[c] = 1.0
        L_frak[:, c] = op.apply(e)

    return DenseInstance(
        disc=disc,
        op=op,
        state_sqrtw=state_sqrtw,
        L0=L0,
        Li=Li,
        Li_star=Li_star,
        L_frak=L_frak,
        leader_sqrtw=leader_sqrtw,
    )


def brute_force_nash(dense: DenseInstance, g_steps=None) -> tuple:
    """Direct dense solve of the stacked optimality system.

    Returns (ControlBundle, info).  Raises on numerically singular
    systems, reporting the condition estimate.
    """
    disc = dense.disc
    A = dense.L_frak
    xi = dense.xi_dense(g_steps)
    if A.size:
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(
                f"dense Nash system numerically singular (cond ~ {cond:.3e})"
            )
        x = scipy.linalg.solve(A, xi)
    else:
        cond = 1.0
        x = np.zeros(0)
    bundle = ControlBundle(
        disc,
        leader=[np.asarray(g, float).copy() for g in g_steps] if g_steps is not None else None,
        followers=dense.op.unpack(x),
    )
    residual = float(np.linalg.norm(A @ x - xi)) / max(float(np.linalg.norm(xi)), 1e-300)
    return bundle, {"cond": float(cond), "residual": residual}


# -- inequality suite -----------------------------------------------------------


@dataclass
class SuiteCase:
    name: str
    passed: bool
    message: str
    seconds: float


@dataclass
class SuiteReport:
    cases: list

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.cases)

    def summary(self) -> str:
        lines = []
        for c in self.cases:
            lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.message}")
        return "\n".join(lines)


def run_inequality_suite(grid: Grid, n_trials: int = 1000, seed: int = 0) -> SuiteReport:
    """Weighted-space inequality checks on random smooth fields."""
    rng = np.random.default_rng(seed)
    cases = []

    t0 = time.time()
    violations = 0
    for _ in range(n_trials):
        f = random_smooth_field(grid, rng)
        lhs, rhs = check_poincare(f)
        if lhs > rhs * (1.0 + 1e-12):
            violations += 1
    cases.append(
        SuiteCase(
            "weighted_poincare",
            violations == 0,
            f"{n_trials} random fields, {violations} violations beyond 1e-12 slack",
            time.time() - t0,
        )
    )

    t0 = time.time()
    phi = grid.phi1().zero_boundary()
    lhs, rhs = check_poincare(phi)
    sat = abs(rhs / lhs - 1.0)
    tol = 20.0 * grid.dy**2 + 1e-8
    cases.append(
        SuiteCase(
            "poincare_saturation_ground_state",
            sat <= tol,
            f"ground state saturates to {sat:.3e} (O(dy^2) budget {tol:.3e})",
            time.time() - t0,
        )
    )

    t0 = time.time()
    worst = 0.0
    y2 = np.sum(grid.points**2, axis=1).reshape(grid.shape)
    for _ in range(min(n_trials, 200)):
        f = random_smooth_field(grid, rng)
        lhs = float(np.sum(grid.quad_K * f.values**2 * y2))
        rhs = grad_inner(f, f)
        if rhs > 0:
            worst = max(worst, lhs / rhs)
    cases.append(
        SuiteCase(
            "moment_inequality",
            math.isfinite(worst) and worst > 0,
            f"int f^2 |y|^2 K <= c int |grad f|^2 K with c >= {worst:.4f} (max observed ratio)",
            time.time() - t0,
        )
    )

    t0 = time.time()
    c_embed = math.sqrt(float(np.sum(grid.quad_Kinv)))
    bad = 0
    for _ in range(min(n_trials, 200)):
        f = random_smooth_field(grid, rng)
        l1 = float(np.sum(grid.trapz_weights * np.abs(f.values)))
        bound = norm_K(f) * c_embed
        if l1 > bound * (1.0 + 1e-12):
            bad += 1
    closed_form = math.sqrt(2.0 * math.sqrt(math.pi)) if grid.dim == 1 else float("nan")
    msg = f"int|v| <= |v|_K (int 1/K)^(1/2), constant {c_embed:.6f}"
    if grid.dim == 1:
        msg += f" (closed form {closed_form:.6f})"
    ok = bad == 0 and (grid.dim != 1 or abs(c_embed - closed_form) < 1e-3)
    cases.append(SuiteCase("L1_embedding", ok, msg + f", {bad} violations", time.time() - t0))

    t0 = time.time()
    lam = spectral_probe(grid, 3)
    err = abs(lam[0] - grid.dim / 2.0)
    cases.append(
        SuiteCase(
            "minimum_eigenvalue",
            err <= 5e-3,
            f"lambda_1 = {lam[0]:.8f}, |lambda_1 - N/2| = {err:.2e}",
            time.time() - t0,
        )
    )
    return SuiteReport(cases)


# -- convergence studies --------------------------------------------------------


def _fit_rate(h: Sequence[float], err: Sequence[float]) -> tuple:
    """Log-log least squares fit; returns (rate, R^2)."""
    x = np.log(np.asarray(h, float))
    y = np.log(np.asarray(err, float))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    yhat = A @ coef
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


def _smooth_rhs(points: np.ndarray, s: float) -> np.ndarray:
    r2 = np.sum(points**2, axis=1)
    return np.exp(-r2 / 2.0) * (1.0 + np.sin(3.0 * s) + 0.5 * np.cos(2.0 * s))


def _forward_smooth(sim, grid: Grid, m: int, theta: float) -> np.ndarray:
    from .state import Discretization, TimeGrid

    tg = TimeGrid(sim.S, m, theta)
    disc = Discretization(sim, grid, tg)
    mids = tg.mids
    rhs_fields = [
        _smooth_rhs(grid.points, float(mids[k])).reshape(grid.shape) for k in range(m)
    ]
    for f in rhs_fields:
        f[~grid.interior_mask] = 0.0
    return disc.forward(lambda k: rhs_fields[k], record=False)


def convergence_study(kind: str, sim=None, theta: float = 0.5, seed: int = 0) -> dict:
    """Self-convergence studies: space, time, or truncation radius.

    space  : forward solve on nested grids (fixed fine time grid), errors
             between successive resolutions on shared nodes; also reports
             the eigen-residual |L phi1 - (N/2) phi1| sequence.
    time   : fixed grid, doubling step counts, theta-scheme order.
    radius : minimum eigenvalue at fixed spacing for growing R.
    """
    if sim is None:
        from .presets import desk

        sim = desk().similarity()
    N = sim.physical.dim

    if kind == "space":
        ns = [33, 65, 129, 257]
        R = 8.0
        finals = []
        for n in ns:
            g = Grid(N, R, n)
            finals.append((g, _forward_smooth(sim, g, 32, theta)))
        errs = []
        hs = []
        base = finals[0][0]
        for (g1, v1), (g2, v2) in zip(finals[:-1], finals[1:]):
            stride = (g2.n - 1) // (g1.n - 1)
            sub = v2[(slice(None, None, stride),) * N]
            diff = Field(g1, sub - v1)
            errs.append(norm_K(diff))
            hs.append(g1.dy)
        rate, r2 = _fit_rate(hs, errs)
        eig_res = []
        for n in ns:
            g = Grid(N, R, n)
            phi = g.phi1()
            eig_res.append(norm_K(apply_L(phi) - (N / 2.0) * phi) / norm_K(phi))
        eig_rate, eig_r2 = _fit_rate([Grid(N, R, n).dy for n in ns], eig_res)
        return {
            "kind": "space",
            "h": hs,
            "errors": errs,
            "rate": rate,
            "r2": r2,
            "eig_residuals": eig_res,
            "eig_residual_rate": eig_rate,
            "rows": [
                {"h": h, "error": e} for h, e in zip(hs, errs)
            ],
        }

    if kind == "time":
        grid = Grid(N, 8.0, 65 if N == 1 else 33)
        ms = [8, 16, 32, 64, 128]
        finals = [_forward_smooth(sim, grid, m, theta) for m in ms]
        ref = _forward_smooth(sim, grid, 512, theta)
        errs = [norm_K(Field(grid, v - ref)) for v in finals]
        hs = [sim.S / m for m in ms]
        rate, r2 = _fit_rate(hs, errs)
        return {
            "kind": "time",
            "theta": theta,
            "h": hs,
            "errors": errs,
            "rate": rate,
            "r2": r2,
            "rows": [{"h": h, "error": e} for h, e in zip(hs, errs)],
        }

    if kind == "radius":
        dy = 0.25
        Rs = [4.0, 6.0, 8.0, 10.0]
        lams = []
        for R in Rs:
            n = int(round(2 * R / dy)) + 1
            lams.append(float(spectral_probe(Grid(N, R, n), 1)[0]))
        ref = lams[-1]
        devs = [abs(l - ref) for l in lams]
        return {
            "kind": "radius",
            "R": Rs,
            "lambda1": lams,
            "deviation_from_largest_R": devs,
            "flat_for_R8": devs[2] <= 1e-8,
            "rows": [
                {"R": R, "lambda1": l, "deviation": d}
                for R, l, d in zip(Rs, lams, devs)
            ],
        }

    raise ValueError(f"unknown study kind {kind!r} (space|time|radius)")
