"""Physical and similarity-variable problem descriptions.

The physical state equation on R^N x (0,T),

    u_t - lap(u) + a u + b . grad(u) = f chi_O + sum_i w_i chi_Oi,  u(0) = 0,

is mapped by y = x/sqrt(t+1), s = log(t+1) to the confined evolution

    v_s + L v + A v + B . grad(v) - (N/2) v = g chi_O'(s) + sum_i h_i chi_Oi'(s)

on (0, S), S = log(T+1), with moving regions O'(s) = exp(-s/2) O.  This
module holds both descriptions, the exact change of variables in both
directions, and the Jacobian factors of the transformation:

    D_ys(s) = exp(s (N+2)/2)   (determinant of (y,s) -> (x,t)),
    D_y     = (1+T)^(N/2)      (determinant of y -> x at t = T),

with bounds k1 = 1 <= D_ys <= k2 = exp(S (N+2)/2) and k3 = k4 = D_y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .weighted import Grid, Field


class ScenarioError(ValueError):
    """Configuration error; the message names the offending key."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by componentwise lo < hi."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(x) for x in self.lo))
        object.__setattr__(self, "hi", tuple(float(x) for x in self.hi))
        if len(self.lo) != len(self.hi):
            raise ScenarioError("box: lo and hi must have the same length")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def validate(self, key: str):
        for lo, hi in zip(self.lo, self.hi):
            if not (lo < hi):
                raise ScenarioError(f"{key}: requires lo < hi componentwise, got {self.lo} / {self.hi}")

    def scaled(self, factor: float) -> "Box":
        return Box(tuple(factor * x for x in self.lo), tuple(factor * x for x in self.hi))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask for points of shape (..., dim)."""
        pts = np.asarray(points, dtype=float)
        inside = np.ones(pts.shape[:-1], dtype=bool)
        for a in range(self.dim):
            inside &= (pts[..., a] >= self.lo[a]) & (pts[..., a] <= self.hi[a])
        return inside

    def disjoint(self, other: "Box") -> bool:
        for a in range(self.dim):
            if self.hi[a] <= other.lo[a] or other.hi[a] <= self.lo[a]:
                return True
        return False


def _as_space_time_fn(spec, dim: int, key: str, vector: bool) -> Callable:
    """Normalize a constant / callable potential spec to f(points, t)."""
    if spec is None:
        spec = 0.0
    if callable(spec):
        return spec
    if vector:
        arr = np.asarray(spec, dtype=float)
        if arr.ndim == 0:
            arr = np.full(dim, float(arr))
        if arr.shape != (dim,):
            raise ScenarioError(f"{key}: expected scalar or length-{dim} vector")

        def vec_const(points, t, _c=arr):
            pts = np.asarray(points)
            return np.broadcast_to(_c, pts.shape[:-1] + (dim,)).copy()

        return vec_const
    c = float(spec)

    def scal_const(points, t, _c=c):
        pts = np.asarray(points)
        return np.full(pts.shape[:-1], _c)

    return scal_const


def _as_target_fn(spec, key: str) -> Callable:
    if spec is None:
        spec = 0.0
    if callable(spec):
        return spec
    c = float(spec)

    def const(points, _c=c):
        pts = np.asarray(points)
        return np.full(pts.shape[:-1], _c)

    return const


@dataclass
class PhysicalScenario:
    """The (x,t) problem: potentials, control regions, weights, target.

    ``a`` and ``b`` may be constants or callables (points, t) -> values;
    ``target`` a constant or callable (points) -> values.  The initial
    state is identically zero (the nonzero case reduces to this one by
    linearity and is not represented).
    """

    dim: int
    T: float
    leader_box: Box
    follower_boxes: Sequence[Box]
    alpha: Sequence[float]
    a: object = 0.0
    b: object = 0.0
    target: object = 0.0
    rho_margin: float = 2.0
    name: str = "scenario"

    def __post_init__(self):
        self.follower_boxes = list(self.follower_boxes)
        self.alpha = [float(x) for x in self.alpha]
        self.a_fn = _as_space_time_fn(self.a, self.dim, "a", vector=False)
        self.b_fn = _as_space_time_fn(self.b, self.dim, "b", vector=True)
        self.target_fn = _as_target_fn(self.target, "target")
        self.validate()

    @property
    def n_followers(self) -> int:
        return len(self.follower_boxes)

    def validate(self):
        if self.dim not in (1, 2):
            raise ScenarioError(f"dim: must be 1 or 2, got {self.dim}")
        if not (self.T > 0):
            raise ScenarioError(f"T: horizon must be positive, got {self.T}")
        if self.leader_box.dim != self.dim:
            raise ScenarioError("leader_box: dimension mismatch")
        self.leader_box.validate("leader_box")
        if len(self.alpha) != len(self.follower_boxes):
            raise ScenarioError("alpha: needs one entry per follower box")
        for i, box in enumerate(self.follower_boxes):
            key = f"follower_boxes[{i}]"
            if box.dim != self.dim:
                raise ScenarioError(f"{key}: dimension mismatch")
            box.validate(key)
            if not box.disjoint(self.leader_box):
                raise ScenarioError(f"{key}: overlaps leader_box")
            for j in range(i):
                if not box.disjoint(self.follower_boxes[j]):
                    raise ScenarioError(f"{key}: overlaps follower_boxes[{j}]")
        for i, al in enumerate(self.alpha):
            if not (al >= 0):
                raise ScenarioError(f"alpha[{i}]: must be nonnegative, got {al}")
        if self.rho_margin < 0:
            raise ScenarioError(f"rho_margin: must be nonnegative, got {self.rho_margin}")


class SimilarityScenario:
    """The (y,s) problem after the change of variables.

    Carries the transformed potentials A, B, the moving control regions,
    the scaled target v^S, and the Jacobian factors with their bounds.
    Regions at time s are the s = 0 boxes scaled by exp(-s/2).
    """

    def __init__(self, physical: PhysicalScenario):
        p = physical
        self.physical = p
        self.dim = p.dim
        self.T = p.T
        self.S = math.log(p.T + 1.0)
        self.alpha = list(p.alpha)
        self.leader_box0 = p.leader_box
        self.follower_boxes0 = list(p.follower_boxes)
        self.rho_margin = p.rho_margin

    @property
    def n_followers(self) -> int:
        return len(self.follower_boxes0)

    # -- transformed coefficients ------------------------------------------

    def A(self, points: np.ndarray, s: float) -> np.ndarray:
        """A(y,s) = e^s a(e^{s/2} y, e^s - 1)."""
        x = math.exp(s / 2.0) * np.asarray(points, dtype=float)
        return math.exp(s) * self.physical.a_fn(x, math.exp(s) - 1.0)

    def B(self, points: np.ndarray, s: float) -> np.ndarray:
        """B(y,s) = e^{s/2} b(e^{s/2} y, e^s - 1)."""
        x = math.exp(s / 2.0) * np.asarray(points, dtype=float)
        return math.exp(s / 2.0) * self.physical.b_fn(x, math.exp(s) - 1.0)

    def target_vS(self, points: np.ndarray) -> np.ndarray:
        """v^S(y) = (1+T)^{N/2} u^T(sqrt(1+T) y)."""
        x = math.sqrt(1.0 + self.T) * np.asarray(points, dtype=float)
        return (1.0 + self.T) ** (self.dim / 2.0) * self.physical.target_fn(x)

    # -- regions -----------------------------------------------------------

    def leader_box_at(self, s: float) -> Box:
        self._check_s(s)
        return self.leader_box0.scaled(math.exp(-s / 2.0))

    def follower_box_at(self, i: int, s: float) -> Box:
        self._check_s(s)
        return self.follower_boxes0[i].scaled(math.exp(-s / 2.0))

    # -- Jacobian factors ----------------------------------------------------

    def jacobian_ys(self, s: float) -> float:
        """|D_{y,s}|(s) = exp(s (N+2)/2); requires 0 <= s <= S."""
        self._check_s(s)
        return math.exp(s * (self.dim + 2) / 2.0)

    def jacobian_y(self) -> float:
        """|D_y| = (1+T)^{N/2}."""
        return (1.0 + self.T) ** (self.dim / 2.0)

    @property
    def k1(self) -> float:
        return 1.0

    @property
    def k2(self) -> float:
        return math.exp(self.S * (self.dim + 2) / 2.0)

    @property
    def k3(self) -> float:
        return self.jacobian_y()

    @property
    def k4(self) -> float:
        return self.jacobian_y()

    def _check_s(self, s: float):
        if s < -1e-12 or s > self.S + 1e-12:
            raise ScenarioError(f"s: time {s} outside [0, {self.S}]")

    # -- localizers ----------------------------------------------------------

    def rho(self, i: int, grid: Grid) -> Field:
        """Localizer rho_i: 1 on the final-time region, smoothstep to 0.

        The transition width is ``rho_margin`` grid cells beyond the box
        of follower i at s = S; margin 0 gives the sharp indicator.
        """
        box = self.follower_box_at(i, self.S)
        margin = self.rho_margin * grid.dy
        pts = grid.points
        if margin == 0.0:
            vals = box.contains(pts).astype(float)
            return Field(grid, vals.reshape(grid.shape))
        # distance outside the box, per axis, in units of the margin
        t = np.ones(pts.shape[0])
        for a in range(self.dim):
            d = np.maximum(box.lo[a] - pts[:, a], pts[:, a] - box.hi[a])
            d = np.clip(d / margin, 0.0, 1.0)
            s = 1.0 - d * d * (3.0 - 2.0 * d)  # smoothstep down from 1
            t = t * s
        return Field(grid, t.reshape(grid.shape))

    # -- coefficient bounds (grid-sampled) ------------------------------------

    def coefficient_bounds(self, grid: Grid, n_times: int = 9) -> tuple:
        """(A0, B0) = sup-norm estimates of A and B by grid sampling."""
        A0 = 0.0
        B0 = 0.0
        for s in np.linspace(0.0, self.S, n_times):
            A0 = max(A0, float(np.max(np.abs(self.A(grid.points, float(s))))))
            Bv = np.asarray(self.B(grid.points, float(s)))
            B0 = max(B0, float(np.max(np.linalg.norm(np.atleast_2d(Bv), axis=-1))))
        return A0, B0


def to_similarity(p: PhysicalScenario) -> SimilarityScenario:
    """Change of variables (x,t) -> (y,s); rejects invalid scenarios."""
    p.validate()
    for i, al in enumerate(p.alpha):
        if not (al > 0):
            raise ScenarioError(f"alpha[{i}]: must be positive for the similarity problem")
    return SimilarityScenario(p)


class InterpolatedControl:
    """Similarity control (per-step grid fields) evaluated at arbitrary (y,s).

    Piecewise constant in s on [s_k, s_{k+1}); multilinear in y, exact at
    grid nodes.  Evaluates to 0 outside the grid box.
    """

    def __init__(self, grid: Grid, times: np.ndarray, step_values: Sequence[np.ndarray]):
        self.grid = grid
        self.times = np.asarray(times, dtype=float)  # m+1 step edges
        if len(step_values) != len(self.times) - 1:
            raise ScenarioError("control: need one field per time step")
        self.step_values = [np.asarray(v, dtype=float) for v in step_values]

    @property
    def S(self) -> float:
        return float(self.times[-1])

    def __call__(self, points: np.ndarray, s: float) -> np.ndarray:
        # nudge guards against roundoff landing just below a step edge
        ds = self.times[1] - self.times[0] if len(self.times) > 1 else 1.0
        k = int(np.searchsorted(self.times, s + 1e-9 * ds, side="right") - 1)
        k = min(max(k, 0), len(self.step_values) - 1)
        return _multilinear(self.grid, self.step_values[k], np.asarray(points, dtype=float))


def _multilinear(grid: Grid, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation on the tensor grid; zero outside."""
    pts = np.atleast_2d(pts)
    u = (pts + grid.R) / grid.dy
    inside = np.all((u >= 0.0) & (u <= grid.n - 1), axis=-1)
    u = np.clip(u, 0.0, grid.n - 1 - 1e-12)
    i0 = np.floor(u).astype(int)
    i0 = np.minimum(i0, grid.n - 2)
    frac = u - i0
    if grid.dim == 1:
        a = values[i0[:, 0]]
        b = values[i0[:, 0] + 1]
        out = a * (1 - frac[:, 0]) + b * frac[:, 0]
    else:
        fx, fy = frac[:, 0], frac[:, 1]
        ix, iy = i0[:, 0], i0[:, 1]
        out = (
            values[ix, iy] * (1 - fx) * (1 - fy)
            + values[ix + 1, iy] * fx * (1 - fy)
            + values[ix, iy + 1] * (1 - fx) * fy
            + values[ix + 1, iy + 1] * fx * fy
        )
    return np.where(inside, out, 0.0)


class PhysicalControl:
    """Physical control f(x,t) obtained from a similarity control by (mv2):

    f(x,t) = (1+t)^{-N/2-1} g(x / sqrt(1+t), log(1+t)).
    """

    def __init__(self, g: InterpolatedControl, dim: int):
        self.g = g
        self.dim = dim

    def __call__(self, points: np.ndarray, t: float) -> np.ndarray:
        if t < -1e-12:
            raise ScenarioError(f"t: time {t} negative")
        tp1 = 1.0 + t
        y = np.asarray(points, dtype=float) / math.sqrt(tp1)
        return tp1 ** (-self.dim / 2.0 - 1.0) * self.g(y, math.log(tp1))


def from_similarity_controls(
    g: InterpolatedControl,
    h: Sequence[InterpolatedControl],
    p: PhysicalScenario,
) -> tuple:
    """Map similarity controls (g, h_1..h_n) to physical (f, w_1..w_n).

    Rejects controls whose horizon disagrees with log(T+1) for ``p``.
    """
    S = math.log(p.T + 1.0)
    for name, ctrl in [("g", g)] + [(f"h[{i}]", hi) for i, hi in enumerate(h)]:
        if abs(ctrl.S - S) > 1e-10 * max(1.0, S):
            raise ScenarioError(
                f"{name}: horizon {ctrl.S} does not match log(T+1) = {S}"
            )
    f = PhysicalControl(g, p.dim)
    w = [PhysicalControl(hi, p.dim) for hi in h]
    return f, w


def sample_similarity_control(
    f: Callable, grid: Grid, times: np.ndarray, dim: int
) -> InterpolatedControl:
    """Sample a physical control f(x,t) into similarity step fields by (mv1):

    g(y,s) = exp(s (N+2)/2) f(exp(s/2) y, exp(s) - 1),

    evaluated at the left edge s_k of every step (the discrete control
    class is piecewise constant in s).
    """
    steps = []
    for k in range(len(times) - 1):
        s = float(times[k])
        x = math.exp(s / 2.0) * grid.points
        t = math.exp(s) - 1.0
        vals = math.exp(s * (dim + 2) / 2.0) * np.asarray(f(x, t), dtype=float)
        steps.append(vals.reshape(grid.shape))
    return InterpolatedControl(grid, times, steps)
