"""PDE residual, physics-informed loss, deflation loss and the LdG energy.

Integrals over the square are quadrature sums over a fixed collocation grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (BoundaryConstants, TrapezoidParams, boundary_constants, boundary_q1,
                       check_fd_precondition, sample_boundary, unconstrained_constants)
from .model import ConstrainedFieldEval, ModelParams, field_eval_all, field_values
from .qfield import QField, trapezoid_weights

RESIDUAL_NORMS = ("l1", "l2")
DEFLATION_COMPONENTS = ("second", "both")


@dataclass
class LdGParams:
    epsilon: float = 0.02

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def trapezoid(self) -> TrapezoidParams:
        return TrapezoidParams.from_epsilon(self.epsilon)


@dataclass
class LossConfig:
    """Weights of the total loss.

    ``soft_boundary`` is ``None`` for the hard-constrained model, or a pair
    ``(alpha1, alpha2)`` weighting interior residual and boundary misfit when
    the model is left unconstrained.
    """

    alpha: float = 0.02
    beta: float = 2.0
    d_min: float = 0.4
    residual_norm: str = "l1"
    soft_boundary: Optional[tuple[float, float]] = None
    deflation_components: str = "second"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not self.d_min > 0:
            raise ValueError("d_min must be positive")
        if self.residual_norm not in RESIDUAL_NORMS:
            raise ValueError(f"residual_norm must be one of {RESIDUAL_NORMS}")
        if self.deflation_components not in DEFLATION_COMPONENTS:
            raise ValueError(f"deflation_components must be one of {DEFLATION_COMPONENTS}")
        if self.soft_boundary is not None:
            a1, a2 = self.soft_boundary
            if a1 < 0 or a2 < 0:
                raise ValueError("soft boundary weights must be non-negative")
            self.soft_boundary = (float(a1), float(a2))

    @property
    def hard_constraint(self) -> bool:
        return self.soft_boundary is None


@dataclass
class CollocationGrid:
    """Interior quadrature lattice with precomputed hard-constraint data.

    ``boundary_*`` arrays are only populated in soft-boundary mode.
    """

    points: np.ndarray
    weights: np.ndarray
    bc: BoundaryConstants
    N: int
    delta: float
    boundary_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    boundary_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boundary_q1: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def hard_constraint(self) -> bool:
        return self.boundary_points.shape[0] == 0


def build_grid(N: int, delta: float, trap: TrapezoidParams, *, offset=(0.2, 0.0),
               h_fd: float = 1e-4, hard_constraint: bool = True) -> CollocationGrid:
    """``N x N`` lattice on ``[delta, 1-delta]^2`` with trapezoid weights.

    ``offset`` shifts the lattice by ``offset * delta`` in x and y so that no
    point falls on the center, the diagonals or the trapezoid breakpoint rays
    of the boundary extension; the shift is less than ``delta`` so all points
    stay interior.
    """
    if N < 2:
        raise ValueError("grid needs at least 2 points per side")
    if not 0.0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 1/2)")
    ox, oy = offset
    if abs(ox) >= 1 or abs(oy) >= 1:
        raise ValueError("grid offset must be smaller than delta")
    t = np.linspace(delta, 1.0 - delta, N)
    X, Y = np.meshgrid(t + ox * delta, t + oy * delta, indexing="xy")
    points = np.stack([X.ravel(), Y.ravel()], axis=1)
    w1 = np.full(N, (1.0 - 2.0 * delta) / (N - 1))
    w1[0] *= 0.5
    w1[-1] *= 0.5
    weights = np.outer(w1, w1).ravel()
    if hard_constraint:
        check_fd_precondition(points[:, 0], points[:, 1], trap, h_fd)
        bc = boundary_constants(points, trap, h_fd)
        return CollocationGrid(points, weights, bc, N, delta)
    bpts = sample_boundary(N - 1)
    bw = np.full(len(bpts), 4.0 / len(bpts))
    return CollocationGrid(points, weights, unconstrained_constants(len(points)), N, delta,
                           boundary_points=bpts, boundary_weights=bw,
                           boundary_q1=np.asarray(boundary_q1(bpts[:, 0], bpts[:, 1], trap)))


def pde_residual(g1, g2, lap1, lap2, ldg: LdGParams):
    """``eps^2 * Lap(G) + 2 (1 - |G|^2) G`` for both components."""
    bulk = 2.0 * (1.0 - g1 * g1 - g2 * g2)
    e2 = ldg.epsilon**2
    return e2 * lap1 + bulk * g1, e2 * lap2 + bulk * g2


def residual_of(ev: ConstrainedFieldEval, ldg: LdGParams):
    return pde_residual(ev.g1, ev.g2, ev.lap1, ev.lap2, ldg)


def residual_penalty(r1, r2, norm: str):
    if norm == "l1":
        return np.abs(r1) + np.abs(r2)
    return r1 * r1 + r2 * r2


def piml_from_residuals(r1, r2, weights, norm: str) -> np.ndarray:
    """Weighted sum over points (axis 0) of the residual penalty."""
    return weights @ residual_penalty(r1, r2, norm)


def piml_loss(params: ModelParams, grid: CollocationGrid, ldg: LdGParams, cfg: LossConfig):
    """Returns ``(per_solution, total)`` of the physics-informed loss."""
    ev = field_eval_all(params, grid.points, grid.bc)
    r1, r2 = residual_of(ev, ldg)
    per = piml_from_residuals(r1, r2, grid.weights, cfg.residual_norm)
    if cfg.soft_boundary is not None:
        a1, a2 = cfg.soft_boundary
        per = a1 * per + a2 * boundary_misfit(params, grid)
    return per, per.sum()


def boundary_misfit(params: ModelParams, grid: CollocationGrid) -> np.ndarray:
    """Per-solution weighted squared misfit to the Dirichlet data on the boundary samples."""
    n = grid.boundary_points.shape[0]
    if n == 0:
        return np.zeros(params.solution_count)
    g1, g2 = field_values(params, grid.boundary_points, np.zeros(n), np.ones(n))
    return grid.boundary_weights @ ((g1 - grid.boundary_q1[:, None]) ** 2 + g2**2)


def grid_values(params: ModelParams, grid: CollocationGrid):
    return field_values(params, grid.points, grid.bc.qb_value, grid.bc.omega_value)


def pairwise_distances(g1, g2, weights, components: str = "second") -> np.ndarray:
    """``(K, K)`` matrix of quadrature L2 distances between solutions (columns)."""
    K = g2.shape[1]
    D = np.zeros((K, K), dtype=np.result_type(g1, g2))
    for i in range(K):
        for j in range(i + 1, K):
            sq = (g2[:, i] - g2[:, j]) ** 2
            if components == "both":
                sq = sq + (g1[:, i] - g1[:, j]) ** 2
            D[i, j] = D[j, i] = np.sqrt(weights @ sq)
    return D


def l2_grid_distance(params: ModelParams, i: int, j: int, grid: CollocationGrid,
                     components: str = "second") -> float:
    """Quadrature L2 distance between solutions ``i`` and ``j`` (second component by default)."""
    if i == j:
        raise ValueError("l2_grid_distance needs two distinct solution indices")
    g1, g2 = grid_values(params, grid)
    sq = (g2[:, i] - g2[:, j]) ** 2
    if components == "both":
        sq = sq + (g1[:, i] - g1[:, j]) ** 2
    return float(np.sqrt(grid.weights @ sq))


def deflation_from_distances(D: np.ndarray, d_min: float) -> float:
    K = D.shape[0]
    if K < 2:
        raise ValueError("deflation loss needs at least two solutions")
    iu = np.triu_indices(K, 1)
    hinge = np.maximum(1.0 - D[iu] / d_min, 0.0)
    return 2.0 / (K * (K - 1)) * hinge.sum()


def deflation_loss(params: ModelParams, grid: CollocationGrid, cfg: LossConfig):
    g1, g2 = grid_values(params, grid)
    D = pairwise_distances(g1, g2, grid.weights, cfg.deflation_components)
    return deflation_from_distances(D, cfg.d_min)


@dataclass
class LossValue:
    value: float
    piml_per_solution: np.ndarray
    deflation: float


def total_loss(params: ModelParams, grid: CollocationGrid, ldg: LdGParams, cfg: LossConfig) -> LossValue:
    per, piml_total = piml_loss(params, grid, ldg, cfg)
    defl = deflation_loss(params, grid, cfg) if params.solution_count > 1 else 0.0
    return LossValue(cfg.alpha * piml_total + cfg.beta * defl, per, defl)


def energy(q: QField, ldg: LdGParams) -> float:
    """Discrete reduced LdG energy ``int |grad Q|^2 + eps^-2 (|Q|^2 - 1)^2``.

    Gradients are central in the interior and one-sided on the boundary rows;
    the integral uses trapezoid weights.
    """
    M = q.M
    if M < 3:
        raise ValueError("energy needs at least a 3 x 3 lattice")
    h = q.h
    dens = np.zeros((M, M))
    for comp in (q.q11, q.q12):
        dy, dx = np.gradient(comp, h, h)
        dens += dx * dx + dy * dy
    dens += (q.q11**2 + q.q12**2 - 1.0) ** 2 / ldg.epsilon**2
    return float(np.sum(trapezoid_weights(M) * dens))
