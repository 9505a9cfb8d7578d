"""Followers' Nash equilibrium as a coercive operator equation.

For a fixed leader control g, the followers' simultaneous optimality
conditions collapse to one linear equation in the product control space H:

    (Lh)_i = |D_ys| h_i + alpha_i L_i^* ( rho_i^2 |D_y| sum_j L_j h_j ) = xi_i,
    xi_i   = alpha_i L_i^* ( rho_i^2 |D_y| eta^S ),   eta^S = v^S - z^S,

with z^S the leader-only final state.  One operator application costs a
single shared forward solve plus one batched adjoint sweep.  The operator
is coercive with constant k1/2 whenever the smallness margin

    margin = k1/2 - max(alpha) k4 max|rho| n C_S^2

is positive; the solver runs either way (the condition is sufficient, not
necessary) and records the margin.  Controls are represented in
orthonormal coordinates of H (quadrature-weighted packing), which turns
the n = 1 case into a plain symmetric positive definite solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .adjoint import solve_adjoint
from .state import ControlBundle, Discretization, SolverError, estimate_Ci, follower_inner
from .weighted import Field


@dataclass
class NashSolveReport:
    """Diagnostics of one Nash solve, serializable for the CLI."""

    residuals: list
    iterations: int
    converged: bool
    margin: float
    C_S: list
    k1: float
    k2: float
    k3: float
    k4: float
    alpha: list
    rho_bar: float
    method: str
    warning: Optional[str] = None
    verified: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "residuals": [float(r) for r in self.residuals],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "margin": float(self.margin),
            "C_S": [float(c) for c in self.C_S],
            "k1": self.k1,
            "k2": self.k2,
            "k3": self.k3,
            "k4": self.k4,
            "alpha": [float(a) for a in self.alpha],
            "rho_bar": self.rho_bar,
            "method": self.method,
            "warning": self.warning,
            "verified": self.verified,
        }


class NashOperator:
    """Matrix-free Nash operator plus the packing of H onto flat vectors."""

    def __init__(self, disc: Discretization):
        self.disc = disc
        d = disc
        self._slices = []
        self._sqrt_w = []
        offset = 0
        for i in range(d.n_followers):
            per_step = []
            for k in range(d.m):
                w = d.mask_weights(d.follower_masks[i][k]) * d.tg.ds
                size = w.size
                per_step.append((slice(offset, offset + size), np.sqrt(w)))
                offset += size
            self._slices.append(per_step)
        self.dim = offset
        self._Ci_cache: Optional[list] = None

    # -- packing -------------------------------------------------------------

    def pack(self, h_steps: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
        x = np.zeros(self.dim)
        for i, per_step in enumerate(self._slices):
            for k, (sl, sw) in enumerate(per_step):
                x[sl] = sw * h_steps[i][k]
        return x

    def unpack(self, x: np.ndarray) -> list:
        out = []
        for per_step in self._slices:
            steps = []
            for sl, sw in per_step:
                vals = np.zeros(sw.shape)
                np.divide(x[sl], sw, out=vals, where=sw > 0)
                steps.append(vals)
            out.append(steps)
        return out

    def follower_slice(self, i: int) -> slice:
        first = self._slices[i][0][0]
        last = self._slices[i][-1][0]
        return slice(first.start, last.stop)

    # -- operator ------------------------------------------------------------

    def final_state_of(self, h_steps: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
        """sum_j L_j h_j via one shared forward solve."""
        d = self.disc

        def rhs(k):
            out = np.zeros(d.grid.shape)
            for i in range(d.n_followers):
                out[d.follower_masks[i][k]] += h_steps[i][k]
            return out

        return d.forward(rhs, record=False)

    def _batched_adjoint_gather(self, error_field: np.ndarray) -> list:
        """alpha_i L_i^*(rho_i^2 Dy error) for all i in one batched sweep."""
        d = self.disc
        n = d.n_followers
        terminals = np.stack([d.Dy * d.rho_sq[i] * error_field for i in range(n)])
        phat = d.backward_transpose(terminals)
        out = []
        for i in range(n):
            steps = [
                d.sim.alpha[i] * phat[k][i][d.follower_masks[i][k]] for k in range(d.m)
            ]
            out.append(steps)
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Packed application of the Nash operator."""
        d = self.disc
        h = self.unpack(x)
        vS = self.final_state_of(h)
        gathered = self._batched_adjoint_gather(vS)
        out = [
            [d.d[k] * h[i][k] + gathered[i][k] for k in range(d.m)]
            for i in range(d.n_followers)
        ]
        return self.pack(out)

    def build_rhs(self, g_steps: Optional[Sequence[np.ndarray]]) -> tuple:
        """(packed xi, z^S): z^S = L_0 g, xi_i = alpha_i L_i^*(rho_i^2 Dy eta^S)."""
        d = self.disc
        if g_steps is None:
            zS = np.zeros(d.grid.shape)
        else:

            def rhs(k):
                return d.scatter(d.leader_masks[k], np.asarray(g_steps[k], float))

            zS = d.forward(rhs, record=False)
        etaS = d.vS.values - zS
        if d.n_followers == 0:
            return np.zeros(0), zS
        xi = self._batched_adjoint_gather(etaS)
        return self.pack(xi), zS

    # -- diagnostics -----------------------------------------------------------

    def C_i_estimates(self, seed: int = 0) -> list:
        if self._Ci_cache is None:
            self._Ci_cache = [
                estimate_Ci(self.disc, i, seed=seed + i)
                for i in range(self.disc.n_followers)
            ]
        return self._Ci_cache

    def rho_bar(self) -> float:
        vals = [float(np.max(np.abs(r))) for r in self.disc.rho]
        return max(vals) if vals else 0.0

    def coercivity_margin(self, seed: int = 0) -> tuple:
        """(margin, C_S list): margin = k1/2 - max(alpha) k4 rho_bar n C_S^2."""
        sim = self.disc.sim
        Ci = self.C_i_estimates(seed=seed)
        n = self.disc.n_followers
        if n == 0:
            return sim.k1 / 2.0, []
        CS = max(Ci)
        margin = sim.k1 / 2.0 - max(sim.alpha) * sim.k4 * self.rho_bar() * n * CS**2
        return margin, Ci

    def operator_norm_estimate(self, iters: int = 12, seed: int = 3) -> float:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(self.dim)
        x /= max(np.linalg.norm(x), 1e-300)
        lam = 0.0
        for _ in range(iters):
            y = self.apply(x)
            # power iteration on L^T L in packed (orthonormal) coordinates
            z = self._apply_transpose(y)
            lam = float(np.dot(x, z))
            nz = np.linalg.norm(z)
            if nz == 0:
                return 0.0
            x = z / nz
        return math.sqrt(max(lam, 0.0))

    def _apply_transpose(self, x: np.ndarray) -> np.ndarray:
        """H-adjoint of the operator: (L* q)_i = d q_i + L_i^*(sum_j a_j rho_j^2 Dy L_j q_j)."""
        d = self.disc
        q = self.unpack(x)
        n = d.n_followers

        def rhs(k):
            out = np.zeros((n,) + d.grid.shape)
            for j in range(n):
                out[j][d.follower_masks[j][k]] = q[j][k]
            return out

        finals = d.forward(rhs, v0=np.zeros((n,) + d.grid.shape), record=False)
        acc = np.zeros(d.grid.shape)
        for j in range(n):
            acc += d.sim.alpha[j] * d.rho_sq[j] * d.Dy * finals[j]
        phat = d.backward_transpose(acc)
        out = [
            [d.d[k] * q[i][k] + phat[k][d.follower_masks[i][k]] for k in range(d.m)]
            for i in range(n)
        ]
        return self.pack(out)


def apply_nash_operator(op: NashOperator, h_steps) -> list:
    """Unpacked convenience wrapper around the packed operator application."""
    return op.unpack(op.apply(op.pack(h_steps)))


def solve_nash(
    disc: Discretization,
    g_steps: Optional[Sequence[np.ndarray]] = None,
    tol: float = 1e-9,
    maxiter: int = 400,
    x0: Optional[np.ndarray] = None,
    seed: int = 0,
) -> tuple:
    """Solve the Nash operator equation; returns (ControlBundle, report).

    Krylov method chosen by structure: CG for the single-follower
    (symmetric positive definite) case, GMRES for coupled followers, with
    a Richardson fallback stepped by the coercivity estimate.  A
    nonpositive margin downgrades to a warning; the solve proceeds.
    """
    op = NashOperator(disc)
    margin, Ci = op.coercivity_margin(seed=seed)
    sim = disc.sim
    warning = None
    if margin <= 0:
        warning = (
            f"smallness margin {margin:.3e} is not positive; the sufficient "
            "condition for invertibility fails (solving anyway)"
        )

    xi, zS = op.build_rhs(g_steps)
    residuals: list = []
    method = "cg" if disc.n_followers == 1 else "gmres"
    if op.dim == 0 or float(np.linalg.norm(xi)) == 0.0:
        x = np.zeros(op.dim)
        method = "trivial"
        converged = True
        iters = 0
    else:
        A = spla.LinearOperator((op.dim, op.dim), matvec=op.apply)
        count = [0]

        if disc.n_followers == 1:

            def count_it(xk):
                count[0] += 1

            x, info = _compat_iterative(
                spla.cg, A, xi, x0=x0, rtol=tol, maxiter=maxiter, callback=count_it
            )
        else:

            def record(res):
                count[0] += 1
                residuals.append(float(res))

            x, info = _compat_iterative(
                spla.gmres,
                A,
                xi,
                x0=x0,
                rtol=tol,
                maxiter=maxiter,
                callback=record,
                callback_type="pr_norm",
            )
        converged = info == 0
        iters = count[0]
        if not converged:
            x, rich_res, rich_iters = _richardson(op, xi, x, tol, maxiter, margin)
            residuals.extend(rich_res)
            iters += rich_iters
            method += "+richardson"
            converged = bool(rich_res and rich_res[-1] <= tol)

    final_res = float(np.linalg.norm(xi - op.apply(x))) / max(float(np.linalg.norm(xi)), 1e-300)
    residuals.append(final_res)
    report = NashSolveReport(
        residuals=residuals,
        iterations=iters,
        converged=bool(converged and final_res <= 10 * tol),
        margin=margin,
        C_S=Ci,
        k1=sim.k1,
        k2=sim.k2,
        k3=sim.k3,
        k4=sim.k4,
        alpha=list(sim.alpha),
        rho_bar=op.rho_bar(),
        method=method,
        warning=warning,
    )
    bundle = ControlBundle(
        disc,
        leader=[np.asarray(g, float).copy() for g in g_steps] if g_steps is not None else None,
        followers=op.unpack(x),
    )
    return bundle, report


def _compat_iterative(fn, A, b, **kwargs):
    """scipy >= 1.12 renamed tol -> rtol for the iterative solvers."""
    try:
        return fn(A, b, **kwargs)
    except TypeError:
        kwargs["tol"] = kwargs.pop("rtol")
        kwargs.setdefault("atol", 0.0)
        return fn(A, b, **kwargs)


def _richardson(op: NashOperator, xi, x0, tol, maxiter, margin):
    """h <- h - tau (Lh - xi) with tau from the coercivity estimate."""
    # coercivity constant is k1/2 when the margin holds; optimistic otherwise
    gamma = op.disc.sim.k1 / 2.0 if margin > 0 else 0.05
    Lnorm = op.operator_norm_estimate()
    tau = gamma / max(Lnorm**2, 1e-300)
    x = np.asarray(x0, float).copy()
    bnorm = max(float(np.linalg.norm(xi)), 1e-300)
    hist = []
    for it in range(maxiter):
        r = op.apply(x) - xi
        rel = float(np.linalg.norm(r)) / bnorm
        hist.append(rel)
        if rel <= tol:
            return x, hist, it + 1
        x -= tau * r
    return x, hist, maxiter


# -- cost functionals ---------------------------------------------------------


def evaluate_Ji(disc: Discretization, bundle: ControlBundle, i: int,
                final_state: Optional[np.ndarray] = None) -> float:
    """J_i by the defining formula: control energy + weighted tracking error.

    J_i = 1/2 int_0^S int_{O_i'} |D_ys| h_i^2 K dy ds
        + alpha_i/2 int |D_y| rho_i^2 (v(S) - v^S)^2 K dy.
    """
    d = disc
    if final_state is None:
        from .state import solve_state

        final_state = solve_state(d, bundle).states[-1]
    ctrl = 0.0
    for k in range(d.m):
        w = d.mask_weights(d.follower_masks[i][k])
        hk = np.asarray(bundle.followers[i][k], float)
        ctrl += d.d[k] * float(np.sum(w * hk * hk))
    ctrl *= 0.5 * d.tg.ds
    err = final_state - d.vS.values
    track = 0.5 * d.sim.alpha[i] * float(
        np.sum(d.grid.quad_K * d.Dy * d.rho_sq[i] * err * err)
    )
    return ctrl + track


def evaluate_Ji_resolvent(disc: Discretization, bundle: ControlBundle, i: int) -> float:
    """J_i by the rewritten resolvent form (independent solves per control):

    J_i = 1/2 ||D_ys^(1/2) h_i||^2
        + alpha_i/2 || |D_y|^(1/2) rho_i (sum_j L_j h_j - eta^S) ||^2,
    eta^S = v^S - z^S.
    """
    d = disc

    def leader_rhs(k):
        return d.scatter(d.leader_masks[k], np.asarray(bundle.leader[k], float))

    zS = d.forward(leader_rhs, record=False)
    etaS = d.vS.values - zS
    acc = np.zeros(d.grid.shape)
    for j in range(d.n_followers):
        from .state import resolvent_Li

        acc += resolvent_Li(d, j, bundle.followers[j]).values
    ctrl = 0.0
    for k in range(d.m):
        w = d.mask_weights(d.follower_masks[i][k])
        hk = np.asarray(bundle.followers[i][k], float)
        ctrl += d.d[k] * float(np.sum(w * hk * hk))
    ctrl *= 0.5 * d.tg.ds
    diff = acc - etaS
    track = 0.5 * d.sim.alpha[i] * float(
        np.sum(d.grid.quad_K * d.Dy * d.rho_sq[i] * diff * diff)
    )
    return ctrl + track


def gateaux_derivative(disc: Discretization, bundle: ControlBundle, i: int,
                       direction: Sequence[np.ndarray]) -> float:
    """d/dt J_i(.., h_i + t delta, ..) at t = 0 via the adjoint state.

    Equals sum_k ds <d_k h_i^k + alpha_i p_i^k, delta^k>_K on the masks,
    with p_i the adjoint of the tracking error.
    """
    d = disc
    from .state import solve_state

    vS = solve_state(d, bundle).states[-1]
    terminal = d.Dy * d.rho_sq[i] * (vS - d.vS.values)
    p = solve_adjoint(d, terminal).restrict_follower(i)
    acc = 0.0
    for k in range(d.m):
        w = d.mask_weights(d.follower_masks[i][k])
        integrand = d.d[k] * bundle.followers[i][k] + d.sim.alpha[i] * p[k]
        acc += float(np.sum(w * integrand * direction[k]))
    return acc * d.tg.ds


def verify_nash(
    disc: Discretization,
    bundle: ControlBundle,
    n_perturbations: int = 4,
    seed: int = 0,
    el_tol: float = 1e-9,
) -> dict:
    """Check unilateral optimality of a candidate equilibrium.

    (a) Euler-Lagrange residual per follower, (b) random unilateral
    deviations never improve J_i beyond roundoff, (c) the adjoint Gateaux
    derivative matches central differences at a non-optimal point.
    """
    d = disc
    op = NashOperator(d)
    rng = np.random.default_rng(seed)
    xi, _ = op.build_rhs(bundle.leader)
    res_packed = op.apply(op.pack(bundle.followers)) - xi
    el_residuals = []
    xi_norm = max(float(np.linalg.norm(xi)), 1e-300)
    for i in range(d.n_followers):
        sl = op.follower_slice(i)
        el_residuals.append(float(np.linalg.norm(res_packed[sl])) / xi_norm)

    J0 = [evaluate_Ji(d, bundle, i) for i in range(d.n_followers)]
    scale = max(max(J0, default=0.0), 1.0)
    deviations_ok = True
    worst_drop = 0.0
    for i in range(d.n_followers):
        for _ in range(n_perturbations):
            delta = [
                rng.standard_normal(bundle.followers[i][k].shape) for k in range(d.m)
            ]
            for t in (1e-2, 1e-3):
                trial = bundle.copy()
                for k in range(d.m):
                    trial.followers[i][k] = trial.followers[i][k] + t * delta[k]
                Jt = evaluate_Ji(d, trial, i)
                drop = J0[i] - Jt
                worst_drop = max(worst_drop, drop)
                if drop > 1e-12 * scale:
                    deviations_ok = False

    # derivative check away from the optimum
    probe = bundle.copy()
    for i in range(d.n_followers):
        for k in range(d.m):
            probe.followers[i][k] = probe.followers[i][k] + rng.standard_normal(
                probe.followers[i][k].shape
            )
    deriv_errs = []
    for i in range(d.n_followers):
        delta = [rng.standard_normal(probe.followers[i][k].shape) for k in range(d.m)]
        dn = math.sqrt(max(follower_inner(d, i, delta, delta), 0.0))
        if dn == 0.0:
            continue
        delta = [dk / dn for dk in delta]
        analytic = gateaux_derivative(d, probe, i, delta)
        t = 1e-4
        plus = probe.copy()
        minus = probe.copy()
        for k in range(d.m):
            plus.followers[i][k] = plus.followers[i][k] + t * delta[k]
            minus.followers[i][k] = minus.followers[i][k] - t * delta[k]
        fd = (evaluate_Ji(d, plus, i) - evaluate_Ji(d, minus, i)) / (2 * t)
        deriv_errs.append(abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-300))

    return {
        "el_residuals": el_residuals,
        "el_ok": bool(all(r <= el_tol for r in el_residuals)),
        "deviations_ok": bool(deviations_ok),
        "worst_improvement": worst_drop,
        "derivative_errors": deriv_errs,
        "derivative_ok": bool(all(e <= 1e-6 for e in deriv_errs)),
        "J": J0,
    }
