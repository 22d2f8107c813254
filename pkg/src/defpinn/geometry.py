"""Star-domain machinery for the unit square.

Polar coordinates about the square's center, the radial boundary distance
(RBD) function, the trapezoidal Dirichlet data, its radial extension into the
interior and the smooth cutoff ``omega`` that vanishes on the boundary.

All functions accept scalars or numpy arrays of coordinates unless stated
otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BOUNDARY_TOL = 1e-12


class GeometryError(ValueError):
    """Raised when a point violates the precondition of a geometric map."""


@dataclass(frozen=True)
class SquareStarDomain:
    center: tuple[float, float] = (0.5, 0.5)
    side: float = 1.0


@dataclass(frozen=True)
class TrapezoidParams:
    """Plateau-ramp width of the trapezoidal boundary profile."""

    d: float

    def __post_init__(self):
        if not 0.0 < self.d < 0.5:
            raise GeometryError(f"trapezoid width must lie in (0, 1/2), got {self.d}")

    @classmethod
    def from_epsilon(cls, epsilon: float) -> "TrapezoidParams":
        return cls(d=3.0 * epsilon)


UNIT_SQUARE = SquareStarDomain()


def polar_about_center(x, y, domain: SquareStarDomain = UNIT_SQUARE):
    """Return ``(phi, rho)`` of ``(x, y) - center`` with ``phi`` in ``[0, 2*pi)``."""
    dx = np.asarray(x, dtype=float) - domain.center[0]
    dy = np.asarray(y, dtype=float) - domain.center[1]
    rho = np.hypot(dx, dy)
    if np.any(rho == 0.0):
        raise GeometryError("polar angle is undefined at the center of the domain")
    phi = np.mod(np.arctan2(dy, dx), 2.0 * math.pi)
    # mod can round a tiny negative angle up to exactly 2*pi
    phi = np.where(phi >= 2.0 * math.pi, 0.0, phi)
    if phi.ndim == 0:
        return float(phi), float(rho)
    return phi, rho


def from_polar(phi, rho, domain: SquareStarDomain = UNIT_SQUARE):
    phi = np.asarray(phi, dtype=float)
    rho = np.asarray(rho, dtype=float)
    return domain.center[0] + rho * np.cos(phi), domain.center[1] + rho * np.sin(phi)


def rbd_square(phi):
    """Distance from the center of the unit square to its boundary along ``phi``."""
    phi = np.asarray(phi, dtype=float)
    r = 0.5 / np.maximum(np.abs(np.cos(phi)), np.abs(np.sin(phi)))
    return float(r) if r.ndim == 0 else r


def trapezoid(t, params: TrapezoidParams):
    """Piecewise linear profile: ramp up on ``[0, d]``, plateau, ramp down on ``[1-d, 1]``."""
    t = np.asarray(t, dtype=float)
    if np.any((t < -BOUNDARY_TOL) | (t > 1.0 + BOUNDARY_TOL)) or np.any(np.isnan(t)):
        raise GeometryError("trapezoid argument outside [0, 1]")
    t = np.clip(t, 0.0, 1.0)
    d = params.d
    out = np.minimum(np.minimum(t / d, (1.0 - t) / d), 1.0)
    return float(out) if out.ndim == 0 else out


def on_horizontal_edge(y):
    y = np.asarray(y, dtype=float)
    return (np.abs(y) <= BOUNDARY_TOL) | (np.abs(y - 1.0) <= BOUNDARY_TOL)


def on_vertical_edge(x):
    return on_horizontal_edge(x)


def boundary_q1(x, y, params: TrapezoidParams):
    """First component of the Dirichlet data on the square boundary.

    ``+T_d(x)`` on ``y = 0`` and ``y = 1``; ``-T_d(y)`` on ``x = 0`` and ``x = 1``.
    At the corners both formulas give 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    horiz = on_horizontal_edge(y)
    vert = on_vertical_edge(x)
    if not np.all(horiz | vert):
        raise GeometryError("boundary_q1 called with a point off the boundary")
    xs = np.clip(x, 0.0, 1.0)
    ys = np.clip(y, 0.0, 1.0)
    out = np.where(horiz, trapezoid(xs, params), -trapezoid(ys, params))
    return float(out) if out.ndim == 0 else out


def radial_projection(x, y, domain: SquareStarDomain = UNIT_SQUARE):
    """Project ``(x, y)`` from the center onto the boundary of the unit square.

    Returns ``(xb, yb, s)`` where ``s = rho / r(phi)`` is the relative radius
    (0 at the center, 1 on the boundary). The coordinate that lands on an edge
    is snapped to exactly 0 or 1. At the center the projection is undefined and
    ``(nan, nan, 0)`` is returned.
    """
    dx = np.asarray(x, dtype=float) - domain.center[0]
    dy = np.asarray(y, dtype=float) - domain.center[1]
    dx, dy = np.broadcast_arrays(dx, dy)
    s = 2.0 * np.maximum(np.abs(dx), np.abs(dy))
    with np.errstate(divide="ignore", invalid="ignore"):
        xb = 0.5 + dx / s
        yb = 0.5 + dy / s
    horiz = np.abs(dy) >= np.abs(dx)
    yb = np.where(horiz, np.where(dy > 0, 1.0, 0.0), yb)
    xb = np.where(~horiz, np.where(dx > 0, 1.0, 0.0), xb)
    centre = s == 0.0
    xb = np.where(centre, np.nan, xb)
    yb = np.where(centre, np.nan, yb)
    return xb, yb, s


def extend_boundary(x, y, params: TrapezoidParams):
    """Radial extension of ``boundary_q1`` into the square with ``h(t) = 1 - t``.

    The value at ``p`` is the boundary value at the radial projection of ``p``
    scaled by the relative radius; it is 0 at the center and equals the
    boundary data on the boundary.
    """
    xb, yb, s = radial_projection(x, y)
    horiz = np.abs(np.asarray(y, dtype=float) - 0.5) >= np.abs(np.asarray(x, dtype=float) - 0.5)
    centre = s == 0.0
    tx = np.where(centre, 0.5, xb)
    ty = np.where(centre, 0.5, yb)
    edge_value = np.where(horiz, trapezoid(tx, params), -trapezoid(ty, params))
    out = np.where(centre, 0.0, edge_value * s)
    return float(out) if out.ndim == 0 else out


def _distance_to_ray(x, y, direction):
    """Distance from points to the ray from the center along ``direction``."""
    ux, uy = direction
    norm = math.hypot(ux, uy)
    ux, uy = ux / norm, uy / norm
    dx = x - 0.5
    dy = y - 0.5
    along = dx * ux + dy * uy
    perp = np.abs(dx * uy - dy * ux)
    return np.where(along >= 0.0, perp, np.hypot(dx, dy))


def singular_sets(params: TrapezoidParams) -> dict[str, list[tuple[float, float]]]:
    """Rays from the center on which the radial extension may fail to be smooth.

    ``diagonals`` are where the RBD function switches branch; ``trapezoid-breakpoints``
    are the rays through the boundary points where ``T_d`` has a kink.
    """
    d = params.d
    diag = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
    breaks = []
    for t in (d, 1.0 - d):
        offset = t - 0.5
        breaks += [(offset, -0.5), (offset, 0.5), (-0.5, offset), (0.5, offset)]
    return {"diagonals": diag, "trapezoid-breakpoints": breaks}


def check_fd_precondition(x, y, params: TrapezoidParams, h_fd: float) -> None:
    """Raise :class:`GeometryError` if any point is within ``2*h_fd`` of a singular set."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    margin = 2.0 * h_fd
    to_boundary = np.minimum(np.minimum(x, 1.0 - x), np.minimum(y, 1.0 - y))
    if np.any(to_boundary <= margin):
        raise GeometryError("point too close to the boundary of the square")
    if np.any(np.hypot(x - 0.5, y - 0.5) <= margin):
        raise GeometryError("point too close to the center of the domain")
    for name, rays in singular_sets(params).items():
        for ray in rays:
            if np.any(_distance_to_ray(x, y, ray) <= margin):
                raise GeometryError(f"point too close to the {name} of the radial extension")


def boundary_extension_derivs(x, y, params: TrapezoidParams, h_fd: float = 1e-4):
    """Value, gradient and Laplacian of :func:`extend_boundary`.

    Derivatives are second-order central differences with step ``h_fd``; the
    value is exact. Returns ``(value, gradient, laplacian)`` where ``gradient``
    has a trailing axis of length 2.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    check_fd_precondition(x, y, params, h_fd)
    f0 = np.asarray(extend_boundary(x, y, params))
    fxp = np.asarray(extend_boundary(x + h_fd, y, params))
    fxm = np.asarray(extend_boundary(x - h_fd, y, params))
    fyp = np.asarray(extend_boundary(x, y + h_fd, params))
    fym = np.asarray(extend_boundary(x, y - h_fd, params))
    grad = np.stack([(fxp - fxm) / (2.0 * h_fd), (fyp - fym) / (2.0 * h_fd)], axis=-1)
    lap = (fxp + fxm + fyp + fym - 4.0 * f0) / h_fd**2
    if f0.ndim == 0:
        return float(f0), grad, float(lap)
    return f0, grad, lap


def cutoff_omega(x, y):
    """``omega = 16 x (1-x) y (1-y)`` with its gradient and Laplacian."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ax = x * (1.0 - x)
    ay = y * (1.0 - y)
    value = 16.0 * ax * ay
    grad = np.stack([16.0 * (1.0 - 2.0 * x) * ay, 16.0 * ax * (1.0 - 2.0 * y)], axis=-1)
    lap = -32.0 * (ax + ay)
    if value.ndim == 0:
        return float(value), grad, float(lap)
    return value, grad, lap


@dataclass
class BoundaryConstants:
    """Per-point data of the hard-constraint composition.

    Arrays of shape ``(n,)`` except the gradients, which are ``(n, 2)``.
    Derivative fields are NaN when they were not requested (boundary samples).
    """

    qb_value: np.ndarray
    qb_gradient: np.ndarray
    qb_laplacian: np.ndarray
    omega_value: np.ndarray
    omega_gradient: np.ndarray
    omega_laplacian: np.ndarray

    def __len__(self):
        return self.qb_value.shape[0]

    def subset(self, idx) -> "BoundaryConstants":
        return BoundaryConstants(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def boundary_constants(points, params: TrapezoidParams, h_fd: float = 1e-4,
                       derivatives: bool = True) -> BoundaryConstants:
    """Precompute the extension and cutoff data for an ``(n, 2)`` array of points."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = points[:, 0], points[:, 1]
    w, wg, wl = cutoff_omega(x, y)
    if derivatives:
        q, qg, ql = boundary_extension_derivs(x, y, params, h_fd)
    else:
        q = np.asarray(extend_boundary(x, y, params), dtype=float).reshape(-1)
        qg = np.full((len(x), 2), np.nan)
        ql = np.full(len(x), np.nan)
    return BoundaryConstants(np.asarray(q, float).reshape(-1), np.asarray(qg).reshape(-1, 2),
                             np.asarray(ql, float).reshape(-1), np.asarray(w).reshape(-1),
                             np.asarray(wg).reshape(-1, 2), np.asarray(wl).reshape(-1))


def unconstrained_constants(n: int) -> BoundaryConstants:
    """Constants that turn the hard-constraint composition into the identity (``G = S``)."""
    return BoundaryConstants(np.zeros(n), np.zeros((n, 2)), np.zeros(n),
                             np.ones(n), np.zeros((n, 2)), np.zeros(n))


def sample_boundary(count_per_edge: int):
    """Equispaced boundary points, ``4 * count_per_edge`` of them, counterclockwise from the origin."""
    t = np.arange(count_per_edge) / count_per_edge
    bottom = np.stack([t, np.zeros_like(t)], axis=1)
    right = np.stack([np.ones_like(t), t], axis=1)
    top = np.stack([1.0 - t, np.ones_like(t)], axis=1)
    left = np.stack([np.zeros_like(t), 1.0 - t], axis=1)
    return np.concatenate([bottom, right, top, left])
