"""Stackelberg-Nash hierarchic control of the heat equation on R^N.

The physical problem is posed on R^N x (0,T); similarity variables
y = x/sqrt(t+1), s = log(t+1) map it to a confined evolution on the
Gaussian-weighted space L^2(K), where leader/follower controls, the Nash
operator equation and the penalized approximate-controllability solve all
live on a truncated weighted tensor grid.
"""

from .weighted import (
    Grid,
    Field,
    GridMismatchError,
    inner_K,
    norm_K,
    norm_H1K,
    apply_L,
    grad_inner,
    check_poincare,
    spectral_probe,
)
from .scenario import (
    Box,
    PhysicalScenario,
    SimilarityScenario,
    ScenarioError,
    to_similarity,
    from_similarity_controls,
)

__all__ = [
    "Grid",
    "Field",
    "GridMismatchError",
    "inner_K",
    "norm_K",
    "norm_H1K",
    "apply_L",
    "grad_inner",
    "check_poincare",
    "spectral_probe",
    "Box",
    "PhysicalScenario",
    "SimilarityScenario",
    "ScenarioError",
    "to_similarity",
    "from_similarity_controls",
]

__version__ = "0.1.0"
