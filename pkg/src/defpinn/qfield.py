"""Two-component Q-tensor fields sampled on a uniform lattice of the unit square."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TrapezoidParams, trapezoid


@dataclass
class QField:
    """``(Q11, Q12)`` on an ``M x M`` lattice including the boundary rows.

    Arrays are indexed ``[iy, ix]`` so that C-order flattening runs over
    ``x`` fastest (y-major lexicographic order).
    """

    q11: np.ndarray
    q12: np.ndarray

    def __post_init__(self):
        self.q11 = np.asarray(self.q11, dtype=float)
        self.q12 = np.asarray(self.q12, dtype=float)
        if self.q11.shape != self.q12.shape or self.q11.ndim != 2 or self.q11.shape[0] != self.q11.shape[1]:
            raise ValueError("QField components must be equal square 2D arrays")

    @property
    def M(self) -> int:
        return self.q11.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / (self.M - 1)

    def stacked(self) -> np.ndarray:
        return np.stack([self.q11, self.q12])

    def copy(self) -> "QField":
        return QField(self.q11.copy(), self.q12.copy())

    def l2_distance(self, other: "QField") -> float:
        """Trapezoidal L2 distance of both components over the unit square."""
        d = (self.q11 - other.q11) ** 2 + (self.q12 - other.q12) ** 2
        return float(np.sqrt(np.sum(trapezoid_weights(self.M) * d)))

    def l2_norm(self) -> float:
        d = self.q11**2 + self.q12**2
        return float(np.sqrt(np.sum(trapezoid_weights(self.M) * d)))

    def reflect_x(self) -> "QField":
        """Mirror across ``x = 1/2``; the director angle changes sign so ``Q12`` flips."""
        return QField(self.q11[:, ::-1], -self.q12[:, ::-1])

    def reflect_y(self) -> "QField":
        return QField(self.q11[::-1, :], -self.q12[::-1, :])

    def transpose(self) -> "QField":
        """Mirror across the diagonal ``y = x``; the director angle maps to ``pi/2 - theta``."""
        return QField(-self.q11.T, self.q12.T)


def lattice(M: int):
    """Coordinates ``(X, Y)`` of the ``M x M`` lattice, indexed ``[iy, ix]``."""
    t = np.linspace(0.0, 1.0, M)
    X, Y = np.meshgrid(t, t, indexing="xy")
    return X, Y


def trapezoid_weights(M: int) -> np.ndarray:
    w = np.full(M, 1.0 / (M - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return np.outer(w, w)


def boundary_mask(M: int) -> np.ndarray:
    mask = np.zeros((M, M), dtype=bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    return mask


def boundary_rows(M: int, params: TrapezoidParams) -> np.ndarray:
    """``Q11`` of the Dirichlet data on the boundary rows (interior entries are 0)."""
    t = np.linspace(0.0, 1.0, M)
    T = trapezoid(t, params)
    q = np.zeros((M, M))
    q[0, :] = T
    q[-1, :] = T
    # vertical edges: corners are 0 by either formula
    q[1:-1, 0] = -T[1:-1]
    q[1:-1, -1] = -T[1:-1]
    return q


def apply_boundary(q: QField, params: TrapezoidParams) -> QField:
    """Overwrite the boundary rows with the exact Dirichlet data."""
    mask = boundary_mask(q.M)
    q11 = np.where(mask, boundary_rows(q.M, params), q.q11)
    q12 = np.where(mask, 0.0, q.q12)
    return QField(q11, q12)
