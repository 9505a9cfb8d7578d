"""Shipped problem presets: oracle-scale and desk-scale configurations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import Box, PhysicalScenario, SimilarityScenario, to_similarity
from .state import Discretization, TimeGrid
from .weighted import Grid


@dataclass
class Preset:
    """Scenario plus the grids it is meant to run on."""

    scenario: PhysicalScenario
    n: int
    R: float
    m: int
    theta: float = 0.5

    def similarity(self) -> SimilarityScenario:
        return to_similarity(self.scenario)

    def discretize(self, n=None, R=None, m=None, theta=None, **kwargs) -> Discretization:
        sim = self.similarity()
        grid = Grid(self.scenario.dim, R or self.R, n or self.n)
        tg = TimeGrid(sim.S, m or self.m, theta if theta is not None else self.theta)
        return Discretization(sim, grid, tg, **kwargs)


def _gauss_target_1d(pts: np.ndarray) -> np.ndarray:
    return np.exp(-pts[:, 0] ** 2)


def _gauss_target(pts: np.ndarray) -> np.ndarray:
    return np.exp(-np.sum(pts**2, axis=1))


def tiny() -> Preset:
    """Oracle scale: dense instances stay under the verification ceiling."""
    scenario = PhysicalScenario(
        dim=1,
        T=1.0,
        leader_box=Box((-1.5,), (-0.5,)),
        follower_boxes=[Box((0.3,), (0.9,)), Box((1.2,), (1.8,))],
        alpha=[0.01, 0.01],
        a=0.0,
        b=0.0,
        target=_gauss_target_1d,
        rho_margin=2.0,
        name="tiny",
    )
    return Preset(scenario, n=33, R=6.0, m=6)


def desk() -> Preset:
    """Default N=1 configuration: Gaussian target, two followers."""
    scenario = PhysicalScenario(
        dim=1,
        T=1.0,
        leader_box=Box((-1.5,), (-0.5,)),
        follower_boxes=[Box((0.3,), (0.9,)), Box((1.2,), (1.8,))],
        alpha=[0.01, 0.01],
        a=0.0,
        b=0.0,
        target=_gauss_target_1d,
        rho_margin=2.0,
        name="desk",
    )
    return Preset(scenario, n=129, R=8.0, m=128)


def desk2d() -> Preset:
    """N=2 configuration on the coarser per-axis grid."""
    scenario = PhysicalScenario(
        dim=2,
        T=1.0,
        leader_box=Box((-1.8, -1.8), (-0.4, -0.4)),
        follower_boxes=[Box((0.3, 0.3), (1.2, 1.2)), Box((1.6, -1.2), (2.4, -0.3))],
        alpha=[0.005, 0.005],
        a=0.0,
        b=0.0,
        target=_gauss_target,
        rho_margin=2.0,
        name="desk2d",
    )
    return Preset(scenario, n=65, R=8.0, m=64)


PRESETS = {"tiny": tiny, "desk": desk, "desk2d": desk2d}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
