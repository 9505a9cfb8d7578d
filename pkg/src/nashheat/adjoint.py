"""Discrete adjoint solvers: follower adjoint states and the leader system.

The adjoints are exact transposes of the forward theta-scheme
(discretize-then-adjoint), so the transposition identity

    sum_k ds <F^k, p^k>_K  =  <xi, v^m>_K

holds to solver accuracy for every source sequence F and terminal datum
xi.  The continuous backward equation

    -p_s + L p + A p - div(B p) - (N/2) p - (y . B p)/2 = 0,   p(S) = xi,

is recovered implicitly: the transpose of the centered advection stencil
against the weighted inner product is the discretization of
-div(B .) - (y . B .)/2, which a consistency test checks on smooth fields.

The leader's coupled system pairs a backward state with n forward states
through a terminal condition; it is solved by a damped fixed point whose
contraction rate is controlled by the same smallness quantity as the Nash
operator's coercivity margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .state import ControlBundle, Discretization, SolverError, Trajectory
from .weighted import Field


@dataclass
class AdjointTrajectory:
    """Backward dual states, stored per time step.

    ``steps[k]`` is the dual field that pairs with a per-step source on
    step k (the transposition identity above); ``terminal`` is the datum
    at s = S.  Indexed forward, computed backward.
    """

    disc: Discretization
    steps: list
    terminal: np.ndarray

    def step_field(self, k: int) -> Field:
        return Field(self.disc.grid, self.steps[k])

    def restrict_leader(self) -> list:
        d = self.disc
        return [self.steps[k][d.leader_masks[k]] for k in range(d.m)]

    def restrict_follower(self, i: int) -> list:
        d = self.disc
        return [self.steps[k][d.follower_masks[i][k]] for k in range(d.m)]

    def time_L2K_norm(self) -> float:
        g = self.disc.grid
        acc = 0.0
        for p in self.steps:
            acc += float(np.sum(g.quad_K * p * p))
        return math.sqrt(max(acc * self.disc.tg.ds, 0.0))


def solve_adjoint(disc: Discretization, terminal: Field | np.ndarray) -> AdjointTrajectory:
    """Backward sweep with the exact transpose of each forward step."""
    term = terminal.values if isinstance(terminal, Field) else np.asarray(terminal, float)
    steps = disc.backward_transpose(term)
    return AdjointTrajectory(disc, steps, term.copy())


def adjoint_of_Li(disc: Discretization, i: int, xi: Field | np.ndarray) -> list:
    """L_i^* xi: the adjoint trajectory restricted to follower i's masks.

    Satisfies <L_i h, xi>_K = sum_k ds <h^k, (L_i^* xi)^k>_K on masks.
    """
    return solve_adjoint(disc, xi).restrict_follower(i)


def nash_terminal(disc: Discretization, i: int, error_field: np.ndarray) -> np.ndarray:
    """Terminal datum |D_y| rho_i^2 (v(S) - v^S) of the follower adjoint."""
    return disc.Dy * disc.rho_sq[i] * error_field


@dataclass
class LeaderAdjointPair:
    """Solution of the coupled leader adjoint system.

    ``phi`` solves the backward equation with terminal datum
    w = zeta + sum_i |D_y| rho_i^2 psi_i(S); each ``psi[i]`` solves the
    forward equation with source -(alpha_i / d_k) phi^k on follower i's
    masks.  ``coupling`` stores w; ``contraction`` the observed rate of
    the fixed-point iteration.
    """

    disc: Discretization
    phi: AdjointTrajectory
    psi: list
    zeta: np.ndarray
    coupling: np.ndarray
    iterations: int
    contraction: float

    def terminal_defect(self) -> float:
        """|w - zeta - sum_i Dy rho_i^2 psi_i(S)| in L^2(K)."""
        d = self.disc
        acc = self.zeta.copy()
        for i in range(d.n_followers):
            acc = acc + d.Dy * d.rho_sq[i] * self.psi[i].states[-1]
        g = d.grid
        diff = self.coupling - acc
        return math.sqrt(max(float(np.sum(g.quad_K * diff * diff)), 0.0))


def solve_leader_adjoint(
    disc: Discretization,
    zeta: Field | np.ndarray,
    tol: float = 1e-9,
    damping: float = 0.5,
    max_iter: int = 200,
) -> LeaderAdjointPair:
    """Solve the coupled backward/forward adjoint system by damped fixed point.

    Iterates w <- (1-gamma) w + gamma (zeta + sum_i Dy rho_i^2 psi_i(S; w)),
    where the psi_i respond to the backward solve of w.  The composite map
    is a contraction when the smallness margin is positive; on failure the
    error reports the observed contraction estimate.
    """
    d = disc
    z = zeta.values if isinstance(zeta, Field) else np.asarray(zeta, dtype=float)
    g = d.grid
    n = d.n_followers

    def norm(x):
        return math.sqrt(max(float(np.sum(g.quad_K * x * x)), 0.0))

    scale = max(norm(z), 1e-300)
    w = z.copy()
    phi = None
    psi_states = None
    prev_delta = None
    rate = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        phi = solve_adjoint(d, w)
        if n:
            # batched forward solve: one source row per follower
            def rhs(k):
                out = np.zeros((n,) + g.shape)
                for i in range(n):
                    mask = d.follower_masks[i][k]
                    out[i][mask] = -(d.sim.alpha[i] / d.d[k]) * phi.steps[k][mask]
                return out

            psi_states = d.forward(rhs, v0=np.zeros((n,) + g.shape), record=True)
            w_new = z.copy()
            for i in range(n):
                w_new = w_new + d.Dy * d.rho_sq[i] * psi_states[-1][i]
        else:
            w_new = z
        delta = norm(w_new - w)
        if prev_delta is not None and prev_delta > 0:
            rate = delta / prev_delta
        prev_delta = delta
        if delta <= tol * scale:
            w = w_new
            break
        w = (1.0 - damping) * w + damping * w_new
    else:
        raise SolverError(
            f"leader adjoint fixed point did not converge in {max_iter} iterations "
            f"(last update {prev_delta:.3e}, contraction estimate {rate:.3f}; "
            f"a nonpositive smallness margin makes the coupling expansive)",
            residual=prev_delta,
        )

    phi = solve_adjoint(d, w)
    psi = []
    for i in range(n):
        traj = Trajectory(d, [s[i] for s in psi_states]) if psi_states is not None else None
        psi.append(traj)
    return LeaderAdjointPair(
        disc=d,
        phi=phi,
        psi=psi,
        zeta=z.copy(),
        coupling=w,
        iterations=it,
        contraction=rate,
    )
