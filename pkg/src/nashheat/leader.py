"""Leader optimization: penalized tracking over the reduced Nash map.

The reduced map g -> v(S; g, h(g)) is affine (the followers' equilibrium
responds linearly to the leader), so approximate controllability is
realized constructively as Tikhonov-penalized least squares,

    min_g  |v(S; g, h(g)) - v^S|^2_{L2(K)} + eps |g|^2,

solved by conjugate gradients on the normal equations.  The gradient is
assembled from the coupled leader adjoint: with zeta the tracking error,
the adjoint pair (phi, psi_1..psi_n) yields  grad = 2 phi|_{O'} + 2 eps g.
Sweeping eps downward traces the density statement: weighted residuals
decrease as the penalty vanishes, and the pull-back to physical variables
obeys  |u(T) - u^T|^2_{L2(R^N)} <= (1+T)^{-N/2} |v(S) - v^S|^2_{L2(K)}.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .adjoint import solve_leader_adjoint
from .nash import NashOperator, NashSolveReport, solve_nash
from .scenario import PhysicalScenario, ScenarioError, to_similarity
from .state import ControlBundle, Discretization, SolverError, leader_inner
from .weighted import Field, norm_K


@dataclass
class LeaderProblem:
    """Configuration of one penalized leader solve."""

    disc: Discretization
    eps: float
    target: Optional[Field] = None
    grad_tol: float = 1e-8
    max_outer: int = 300
    nash_tol: float = 1e-9
    adjoint_tol: float = 1e-9
    warm_start: bool = True

    def __post_init__(self):
        if not (self.eps > 0):
            raise ValueError(f"penalty eps must be positive, got {self.eps}")
        if self.target is not None:
            tgt = self.target.values
            if not np.all(np.isfinite(tgt * np.sqrt(self.disc.grid.K))):
                raise ScenarioError(
                    "target: not representable on the grid "
                    "(weighted norm overflows after K-weighting)"
                )


@dataclass
class SweepEntry:
    eps: float
    weighted_residual: float
    physical_residual: float
    physical_bound: float
    leader_norm: float
    nash_iters: int
    outer_iters: int
    grad_rel: float

    @property
    def physical_bound_ok(self) -> bool:
        return self.physical_residual <= self.physical_bound * (1.0 + 1e-10)


@dataclass
class ControllabilityReport:
    """epsilon-sweep table plus the final achieved quantities."""

    entries: list

    @property
    def achieved_residual(self) -> float:
        return self.entries[-1].weighted_residual if self.entries else math.nan

    @property
    def leader_norm(self) -> float:
        return self.entries[-1].leader_norm if self.entries else math.nan

    def residuals_monotone(self, slack: float = 1e-10) -> bool:
        r = [e.weighted_residual for e in self.entries]
        return all(r[i + 1] <= r[i] * (1.0 + slack) for i in range(len(r) - 1))

    def physical_bounds_ok(self) -> bool:
        return all(e.physical_bound_ok for e in self.entries)

    def rows(self) -> list:
        return [
            {
                "epsilon": e.eps,
                "weighted_residual": e.weighted_residual,
                "physical_residual": e.physical_residual,
                "leader_norm": e.leader_norm,
                "nash_iters": e.nash_iters,
                "outer_iters": e.outer_iters,
            }
            for e in self.entries
        ]


class LeaderSolver:
    """Matrix-free normal-equation CG over the affine reduced map."""

    def __init__(self, problem: LeaderProblem, seed: int = 0):
        self.problem = problem
        disc = problem.disc
        if problem.target is not None:
            disc = with_target(disc, problem.target.values)
        self.disc = disc
        self.op = NashOperator(self.disc)
        self.margin, self.Ci = self.op.coercivity_margin(seed=seed)
        self._nash_warm: Optional[np.ndarray] = None
        self._nash_warm_affine: Optional[np.ndarray] = None
        self.nash_matvecs = 0

        d = self.disc
        self._sqrt_w = [
            np.sqrt(d.mask_weights(d.leader_masks[k]) * d.tg.ds) for k in range(d.m)
        ]
        self.dim = int(sum(w.size for w in self._sqrt_w))

    # -- leader control packing (isometric onto Euclidean coordinates) -------

    def pack(self, g_steps: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate(
            [self._sqrt_w[k] * np.asarray(g_steps[k], float) for k in range(self.disc.m)]
        ) if self.dim else np.zeros(0)

    def unpack(self, x: np.ndarray) -> list:
        out = []
        off = 0
        for k in range(self.disc.m):
            w = self._sqrt_w[k]
            vals = np.zeros(w.shape)
            np.divide(x[off : off + w.size], w, out=vals, where=w > 0)
            out.append(vals)
            off += w.size
        return out

    def zero_control(self) -> list:
        return [np.zeros(w.shape) for w in self._sqrt_w]

    # -- reduced map ----------------------------------------------------------

    def nash_response(self, g_steps, affine_part: bool, tol=None) -> tuple:
        """Followers' equilibrium for g; affine_part solves against -z^S only."""
        d = self.disc
        op = self.op
        if g_steps is None:
            zS = np.zeros(d.grid.shape)
        else:

            def rhs(k):
                return d.scatter(d.leader_masks[k], np.asarray(g_steps[k], float))

            zS = d.forward(rhs, record=False)
        if d.n_followers == 0:
            return [], zS, 0
        err = -zS if affine_part else d.vS.values - zS
        xi = op.pack(op._batched_adjoint_gather(err))
        import scipy.sparse.linalg as spla

        from .nash import _compat_iterative

        A = spla.LinearOperator((op.dim, op.dim), matvec=_counting(op.apply, self))
        warm = self._nash_warm_affine if affine_part else self._nash_warm
        x0 = warm if (self.problem.warm_start and warm is not None) else None
        tol = tol if tol is not None else self.problem.nash_tol
        bn = float(np.linalg.norm(xi))
        if bn == 0.0:
            x = np.zeros(op.dim)
            info = 0
        elif d.n_followers == 1:
            x, info = _compat_iterative(spla.cg, A, xi, x0=x0, rtol=tol, maxiter=500)
        else:
            x, info = _compat_iterative(spla.gmres, A, xi, x0=x0, rtol=tol, maxiter=500)
        if info != 0:
            raise SolverError(f"inner Nash solve failed to converge (info={info})")
        if affine_part:
            self._nash_warm_affine = x.copy()
        else:
            self._nash_warm = x.copy()
        return op.unpack(x), zS, 0

    def reduced_final(self, g_steps, affine_part: bool = False) -> np.ndarray:
        """v(S; g, h(g)), or the linear part of the map when affine_part."""
        d = self.disc
        h, zS, _ = self.nash_response(g_steps, affine_part)
        if d.n_followers == 0:
            return zS

        def rhs(k):
            out = np.zeros(d.grid.shape)
            if g_steps is not None:
                out[d.leader_masks[k]] += np.asarray(g_steps[k], float)
            for i in range(d.n_followers):
                out[d.follower_masks[i][k]] += h[i][k]
            return out

        return d.forward(rhs, record=False)

    def adjoint_apply(self, zeta: np.ndarray) -> list:
        """R^* zeta = phi restricted to the leader masks (coupled adjoint)."""
        pair = solve_leader_adjoint(
            self.disc, zeta, tol=self.problem.adjoint_tol
        )
        return pair.phi.restrict_leader()

    # -- outer solve ------------------------------------------------------------

    def solve(self) -> tuple:
        """Minimize |R g - v^S|^2 + eps |g|^2; returns (g_steps, info dict)."""
        p = self.problem
        d = self.disc
        r0 = self.reduced_final(None)  # affine offset: response to g = 0
        target_misfit = d.vS.values - r0
        b = self.pack(self.adjoint_apply(target_misfit))
        eps = p.eps

        def normal_op(x):
            g = self.unpack(x)
            rg = self.reduced_final(g, affine_part=True)
            return self.pack(self.adjoint_apply(rg)) + eps * x

        x = np.zeros(self.dim)
        bnorm = float(np.linalg.norm(b))
        hist = []
        converged = True
        iters = 0
        if bnorm > 0:
            x, hist, converged, iters = _cg_euclid(
                normal_op, b, tol=p.grad_tol, maxiter=p.max_outer
            )
        g = self.unpack(x)
        final = self.reduced_final(g)
        residual_field = final - d.vS.values
        weighted_residual = math.sqrt(
            max(float(np.sum(d.grid.quad_K * residual_field**2)), 0.0)
        )
        info = {
            "outer_iters": iters,
            "grad_history": hist,
            "grad_rel": hist[-1] if hist else 0.0,
            "converged": converged,
            "weighted_residual": weighted_residual,
            "leader_norm": math.sqrt(max(leader_inner(d, g, g), 0.0)),
            "final_state": final,
            "margin": self.margin,
        }
        return g, info

    def objective(self, g_steps) -> float:
        d = self.disc
        r = self.reduced_final(g_steps) - d.vS.values
        return float(np.sum(d.grid.quad_K * r * r)) + self.problem.eps * leader_inner(
            d, g_steps, g_steps
        )

    def gradient(self, g_steps) -> list:
        """Adjoint gradient 2 phi|_{O'} + 2 eps g of the penalized objective."""
        d = self.disc
        zeta = self.reduced_final(g_steps) - d.vS.values
        phi_g = self.adjoint_apply(zeta)
        return [
            2.0 * phi_g[k] + 2.0 * self.problem.eps * np.asarray(g_steps[k], float)
            for k in range(d.m)
        ]


def _counting(fn, solver):
    def wrapped(x):
        solver.nash_matvecs += 1
        return fn(x)

    return wrapped


def _cg_euclid(matvec, b, tol, maxiter, bnorm_ref=None):
    """Plain CG with stagnation detection.

    Residuals are tracked relative to ``bnorm_ref`` (defaults to |b|);
    continuation solves pass the unshifted gradient scale instead.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    bnorm = max(float(bnorm_ref if bnorm_ref is not None else np.linalg.norm(b)), 1e-300)
    hist = [1.0]
    rs = float(np.dot(r, r))
    best = 1.0
    stall = 0
    it = 0
    for it in range(1, maxiter + 1):
        Ap = matvec(p)
        pAp = float(np.dot(p, Ap))
        if pAp <= 0:
            break
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(np.dot(r, r))
        rel = math.sqrt(rs_new) / bnorm
        hist.append(rel)
        if rel <= tol:
            return x, hist, True, it
        if rel < best * 0.999:
            best = rel
            stall = 0
        else:
            stall += 1
            if stall >= 12:
                break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, hist, False, it


def with_target(disc: Discretization, target_values: np.ndarray) -> Discretization:
    """Shallow copy of a discretization with the target field replaced."""
    d2 = copy.copy(disc)
    d2.vS = Field(disc.grid, np.asarray(target_values, float))
    return d2


def reduced_map(disc: Discretization, g_steps, nash_tol: float = 1e-9) -> Field:
    """v(S; g, h(g)): one Nash solve plus one forward solve; affine in g."""
    solver = LeaderSolver(LeaderProblem(disc, eps=1.0, nash_tol=nash_tol))
    return Field(disc.grid, solver.reduced_final(g_steps))


def solve_leader(problem: LeaderProblem, seed: int = 0) -> tuple:
    """Penalized leader solve; returns (g_steps, info dict)."""
    solver = LeaderSolver(problem, seed=seed)
    if solver.margin <= 0:
        # sufficient condition fails; proceed, mirroring the Nash solver
        pass
    return solver.solve()


def physical_pullback_residual(disc: Discretization, final_state: np.ndarray) -> tuple:
    """(physical residual, weighted bound) of Theorem-style step 1.

    Pulls v(S) and v^S back to physical variables on the scaled grid
    x = sqrt(1+T) y and compares the plain L^2(R^N) error of u(T) against
    the bound (1+T)^{-N/2} |v(S) - v^S|^2_{L2(K)} (both sides computed
    independently, returned as norms not squares).
    """
    d = disc
    g = d.grid
    T = d.sim.T
    scale = math.sqrt(1.0 + T)
    uT = (1.0 + T) ** (-g.dim / 2.0) * final_state
    uT_target = (1.0 + T) ** (-g.dim / 2.0) * d.vS.values
    # physical trapezoid weights on the scaled grid
    w_phys = g.trapz_weights * scale**g.dim
    diff = uT - uT_target
    phys_sq = float(np.sum(w_phys * diff * diff))
    err = final_state - d.vS.values
    weighted_sq = float(np.sum(g.quad_K * err * err))
    bound_sq = (1.0 + T) ** (-g.dim / 2.0) * weighted_sq
    return math.sqrt(max(phys_sq, 0.0)), math.sqrt(max(bound_sq, 0.0))


def controllability_experiment(
    physical: PhysicalScenario,
    grid_n: int,
    grid_R: float,
    m: int,
    eps_values: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4),
    theta: float = 0.5,
    grad_tol: float = 1e-8,
    seed: int = 0,
) -> tuple:
    """Two-step controllability run: similarity solve then physical pull-back.

    Maps the physical target to v^S, sweeps the penalty downward (warm
    starting each solve from the previous one), and verifies the
    weighted-to-physical residual inequality for every entry.  Returns
    (ControllabilityReport, final g_steps, discretization).
    """
    from .state import TimeGrid
    from .weighted import Grid

    sim = to_similarity(physical)
    grid = Grid(physical.dim, grid_R, grid_n)
    tg = TimeGrid(sim.S, m, theta)
    disc = Discretization(sim, grid, tg)
    if not np.all(np.isfinite(disc.vS.values * np.sqrt(grid.K))):
        raise ScenarioError(
            "target: not representable on the grid (weighted norm overflow)"
        )

    entries = []
    solver = None
    g = None
    for eps in eps_values:
        problem = LeaderProblem(disc, eps=eps, grad_tol=grad_tol)
        if solver is None:
            solver = LeaderSolver(problem, seed=seed)
        else:
            prev = solver
            solver = LeaderSolver.__new__(LeaderSolver)
            solver.__dict__.update(prev.__dict__)
            solver.problem = problem
        if g is not None:
            # continuation: start the CG from the previous epsilon's control
            g, info = _solve_with_start(solver, g)
        else:
            g, info = solver.solve()
        phys_res, bound = physical_pullback_residual(disc, info["final_state"])
        entries.append(
            SweepEntry(
                eps=eps,
                weighted_residual=info["weighted_residual"],
                physical_residual=phys_res,
                physical_bound=bound,
                leader_norm=info["leader_norm"],
                nash_iters=solver.nash_matvecs,
                outer_iters=info["outer_iters"],
                grad_rel=info["grad_rel"],
            )
        )
    return ControllabilityReport(entries), g, disc


def _solve_with_start(solver: LeaderSolver, g_start) -> tuple:
    """Leader solve warm-started at g_start (continuation across epsilon)."""
    p = solver.problem
    d = solver.disc
    r0 = solver.reduced_final(None)
    b = solver.pack(solver.adjoint_apply(d.vS.values - r0))
    eps = p.eps

    def normal_op(x):
        gg = solver.unpack(x)
        rg = solver.reduced_final(gg, affine_part=True)
        return solver.pack(solver.adjoint_apply(rg)) + eps * x

    x_start = solver.pack(g_start)
    # shift: solve A dx = b - A x_start, then x = x_start + dx
    b_shift = b - normal_op(x_start)
    dx, hist, converged, iters = _cg_euclid(
        normal_op,
        b_shift,
        tol=p.grad_tol,
        maxiter=p.max_outer,
        bnorm_ref=float(np.linalg.norm(b)),
    )
    x = x_start + dx
    g = solver.unpack(x)
    final = solver.reduced_final(g)
    residual_field = final - d.vS.values
    weighted_residual = math.sqrt(
        max(float(np.sum(d.grid.quad_K * residual_field**2)), 0.0)
    )
    info = {
        "outer_iters": iters,
        "grad_history": hist,
        "grad_rel": hist[-1] if hist else 0.0,
        "converged": converged,
        "weighted_residual": weighted_residual,
        "leader_norm": math.sqrt(max(leader_inner(d, g, g), 0.0)),
        "final_state": final,
        "margin": solver.margin,
    }
    return g, info
