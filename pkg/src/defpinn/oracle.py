"""Finite-difference reference solver for the reduced LdG equations on the unit square.

The discrete problem is ``F(Q) = -Lap_h Q - 2 eps^-2 (1 - |Q|^2) Q = 0`` on the
interior nodes of an ``M x M`` lattice, with the trapezoidal Dirichlet data on
the boundary rows. Stable states are found by seeding with harmonic director
angle fields, relaxing with a semi-implicit gradient flow and polishing with a
matrix-free Newton-Krylov iteration.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dstn
from scipy.sparse.linalg import LinearOperator, lobpcg, minres

from .losses import LdGParams, energy
from .qfield import QField, apply_boundary

log = logging.getLogger(__name__)

LABELS = ("D1", "D2", "R1", "R2", "R3", "R4")


class OracleError(RuntimeError):
    pass


@dataclass
class OracleConfig:
    grid_size: int = 65
    epsilon: float = 0.02
    flow_step: float = 1e-4
    flow_tol: float = 1.0
    newton_tol: float = 1e-8
    max_flow_iters: int = 200_000
    max_newton_iters: int = 50
    krylov_tol: float = 1e-12
    dedup_threshold: float = 0.1
    discovery: str = "enumerate"

    def __post_init__(self):
        if self.grid_size < 17:
            raise ValueError("oracle grid_size must be at least 17")
        for name in ("flow_step", "flow_tol", "newton_tol", "krylov_tol", "dedup_threshold", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.discovery not in ("enumerate", "deflation"):
            raise ValueError("discovery must be 'enumerate' or 'deflation'")

    @property
    def ldg(self) -> LdGParams:
        return LdGParams(self.epsilon)


# ---------------------------------------------------------------- stencils

def _laplacian_interior(a: np.ndarray, h: float) -> np.ndarray:
    """5-point Laplacian of a full ``M x M`` array, returned on interior nodes."""
    return (a[2:, 1:-1] + a[:-2, 1:-1] + a[1:-1, 2:] + a[1:-1, :-2] - 4.0 * a[1:-1, 1:-1]) / (h * h)


def fd_residual(q: QField, ldg: LdGParams):
    """Interior residual ``(F11, F12)`` of the discrete Euler-Lagrange equations."""
    h = q.h
    inner = (slice(1, -1), slice(1, -1))
    a, b = q.q11[inner], q.q12[inner]
    bulk = 2.0 / ldg.epsilon**2 * (1.0 - a * a - b * b)
    return (-_laplacian_interior(q.q11, h) - bulk * a,
            -_laplacian_interior(q.q12, h) - bulk * b)


def residual_inf_norm(q: QField, ldg: LdGParams) -> float:
    f1, f2 = fd_residual(q, ldg)
    return float(max(np.abs(f1).max(), np.abs(f2).max()))


def stencil_energy(q: QField, ldg: LdGParams) -> float:
    """Energy whose gradient is ``2 h^2 F``: edge differences plus nodal bulk on interior nodes."""
    h = q.h
    e = 0.0
    for c in (q.q11, q.q12):
        e += np.sum(np.diff(c, axis=0) ** 2) + np.sum(np.diff(c, axis=1) ** 2)
    a, b = q.q11[1:-1, 1:-1], q.q12[1:-1, 1:-1]
    e += h * h / ldg.epsilon**2 * np.sum((a * a + b * b - 1.0) ** 2)
    return float(e)


class DirichletSolver:
    """Exact solves with ``I + tau * (-Lap_h)`` on interior nodes via the type-I sine transform."""

    def __init__(self, M: int):
        n = M - 2
        h = 1.0 / (M - 1)
        k = np.arange(1, n + 1)
        lam = 4.0 / h**2 * np.sin(k * math.pi / (2 * (n + 1))) ** 2
        self.eig = lam[:, None] + lam[None, :]

    def solve(self, rhs: np.ndarray, tau: float = 1.0, shift: float = 0.0, identity: float = 1.0):
        """Solve ``(identity + tau * (-Lap_h + shift)) u = rhs`` for interior arrays."""
        coef = identity + tau * (self.eig + shift)
        return dstn(dstn(rhs, type=1, norm="ortho") / coef, type=1, norm="ortho")


def _boundary_load(a: np.ndarray, h: float) -> np.ndarray:
    """Boundary-neighbour contribution of the 5-point stencil on interior nodes."""
    load = np.zeros((a.shape[0] - 2, a.shape[1] - 2))
    load[0, :] += a[0, 1:-1]
    load[-1, :] += a[-1, 1:-1]
    load[:, 0] += a[1:-1, 0]
    load[:, -1] += a[1:-1, -1]
    return load / (h * h)


def _with_interior(q: QField, a: np.ndarray, b: np.ndarray) -> QField:
    q11 = q.q11.copy()
    q12 = q.q12.copy()
    q11[1:-1, 1:-1] = a
    q12[1:-1, 1:-1] = b
    return QField(q11, q12)


# ---------------------------------------------------------------- seeding

def angle_seed(jumps, config: OracleConfig) -> QField:
    """Seed from a harmonic director angle with prescribed corner jumps.

    The angle is 0 on the bottom edge; going counterclockwise, the jumps at the
    bottom-right, top-right and top-left corners give the angle on the right,
    top and left edges. The last jump closes the loop at the bottom-left corner
    and does not enter the edge values.
    """
    jumps = tuple(float(j) for j in jumps)
    if len(jumps) != 4 or any(not math.isclose(abs(j), math.pi / 2) for j in jumps):
        raise ValueError("jumps must be four values of +-pi/2")
    M = config.grid_size
    h = 1.0 / (M - 1)
    theta = np.zeros((M, M))
    right = jumps[0]
    top = right + jumps[1]
    left = top + jumps[2]
    theta[0, :] = 0.0
    theta[:, -1] = right
    theta[-1, :] = top
    theta[:, 0] = left
    solver = DirichletSolver(M)
    # Laplace: -Lap_h u = load  ->  u = (-Lap_h)^-1 load
    interior = solver.solve(_boundary_load(theta, h), tau=1.0, identity=0.0)
    theta[1:-1, 1:-1] = interior
    q = QField(np.cos(2 * theta), np.sin(2 * theta))
    return apply_boundary(q, config.ldg.trapezoid)


# ---------------------------------------------------------------- relaxation

@dataclass
class RelaxResult:
    q: QField
    iterations: int
    residual: float
    energies: list = field(default_factory=list, repr=False)


def relax(seed: QField, config: OracleConfig, ldg: LdGParams | None = None) -> RelaxResult:
    """Semi-implicit gradient flow until the residual sup-norm drops below ``flow_tol``.

    Each step solves ``(I + tau (-Lap_h)) Q_new = Q + tau (2 eps^-2 (1 - |Q|^2) Q + boundary load)``.
    A step that increases :func:`stencil_energy` is rejected and ``tau`` halved;
    accepted steps let ``tau`` grow back by 10% up to its initial value.
    """
    ldg = ldg or config.ldg
    q = seed.copy()
    M, h = q.M, q.h
    solver = DirichletSolver(M)
    load = (_boundary_load(q.q11, h), _boundary_load(q.q12, h))
    coef = 2.0 / ldg.epsilon**2
    tau = config.flow_step
    e = stencil_energy(q, ldg)
    energies = [e]
    res = residual_inf_norm(q, ldg)
    it = 0
    while res >= config.flow_tol:
        if it >= config.max_flow_iters:
            raise OracleError(f"gradient flow did not converge: residual {res:.3e} after {it} steps")
        a, b = q.q11[1:-1, 1:-1], q.q12[1:-1, 1:-1]
        bulk = coef * (1.0 - a * a - b * b)
        na = solver.solve(a + tau * (bulk * a + load[0]), tau)
        nb = solver.solve(b + tau * (bulk * b + load[1]), tau)
        trial = _with_interior(q, na, nb)
        e_new = stencil_energy(trial, ldg)
        it += 1
        if e_new > e:
            tau *= 0.5
            if tau < 1e-14:
                raise OracleError("gradient flow step collapsed")
            continue
        q, e = trial, e_new
        energies.append(e)
        tau = min(tau * 1.1, config.flow_step)
        res = residual_inf_norm(q, ldg)
    return RelaxResult(q, it, res, energies)


# ---------------------------------------------------------------- Newton

def jacobian_operator(q: QField, ldg: LdGParams) -> LinearOperator:
    """Matrix-free Jacobian of :func:`fd_residual` acting on stacked interior perturbations."""
    h = q.h
    n = q.M - 2
    a, b = q.q11[1:-1, 1:-1], q.q12[1:-1, 1:-1]
    c = 2.0 / ldg.epsilon**2
    diag = c * (1.0 - a * a - b * b)

    def lap0(v):
        full = np.zeros((n + 2, n + 2))
        full[1:-1, 1:-1] = v
        return _laplacian_interior(full, h)

    def matvec(x):
        x = np.asarray(x).reshape(2, n, n)
        va, vb = x
        dot = a * va + b * vb
        ja = -lap0(va) - diag * va + 2.0 * c * a * dot
        jb = -lap0(vb) - diag * vb + 2.0 * c * b * dot
        return np.concatenate([ja.ravel(), jb.ravel()])

    size = 2 * n * n
    return LinearOperator((size, size), matvec=matvec, rmatvec=matvec, dtype=float)


def _preconditioner(M: int, ldg: LdGParams) -> LinearOperator:
    n = M - 2
    solver = DirichletSolver(M)
    shift = 2.0 / ldg.epsilon**2

    def apply(x):
        x = np.asarray(x).reshape(2, n, n)
        return np.concatenate([solver.solve(x[0], 1.0, shift, 0.0).ravel(),
                               solver.solve(x[1], 1.0, shift, 0.0).ravel()])

    size = 2 * n * n
    return LinearOperator((size, size), matvec=apply, dtype=float)


@dataclass
class PolishResult:
    q: QField
    converged: bool
    steps: int
    residuals: list
    warning: str = ""


def newton_polish(q: QField, config: OracleConfig, ldg: LdGParams | None = None) -> PolishResult:
    """Damped Newton on the discrete system with MINRES inner solves.

    Backtracks on the residual 2-norm. On line-search failure the input is
    returned unchanged with ``warning`` set.
    """
    ldg = ldg or config.ldg
    n = q.M - 2
    precond = _preconditioner(q.M, ldg)
    cur = q.copy()
    f1, f2 = fd_residual(cur, ldg)
    F = np.concatenate([f1.ravel(), f2.ravel()])
    history = [float(np.abs(F).max())]
    steps = 0
    while history[-1] >= config.newton_tol:
        if steps >= config.max_newton_iters:
            return PolishResult(q, False, steps, history, "newton iteration budget exhausted")
        J = jacobian_operator(cur, ldg)
        delta, info = minres(J, -F, M=precond, rtol=config.krylov_tol, maxiter=2000)
        norm0 = np.linalg.norm(F)
        t = 1.0
        while True:
            da, db = delta.reshape(2, n, n)
            trial = _with_interior(cur, cur.q11[1:-1, 1:-1] + t * da, cur.q12[1:-1, 1:-1] + t * db)
            g1, g2 = fd_residual(trial, ldg)
            G = np.concatenate([g1.ravel(), g2.ravel()])
            if np.linalg.norm(G) <= (1.0 - 1e-4 * t) * norm0 or np.abs(G).max() < config.newton_tol:
                break
            t *= 0.5
            if t < 1e-6:
                return PolishResult(q, False, steps, history, "line search failed")
        cur, F = trial, G
        steps += 1
        history.append(float(np.abs(F).max()))
    return PolishResult(cur, True, steps, history)


# ---------------------------------------------------------------- discovery

def corner_patterns():
    """All 16 sign patterns of the four corner jumps, in a fixed order."""
    return list(itertools.product((1, -1), repeat=4))


@dataclass
class SolutionSet:
    solutions: dict
    energies: dict
    residuals: dict
    distances: np.ndarray
    patterns: dict = field(default_factory=dict)

    def __getitem__(self, label: str) -> QField:
        return self.solutions[label]

    def labels(self):
        return list(self.solutions)

    def summary(self) -> dict:
        return {"labels": self.labels(),
                "energies": {k: float(v) for k, v in self.energies.items()},
                "residuals": {k: float(v) for k, v in self.residuals.items()},
                "distance_matrix": np.asarray(self.distances).tolist(),
                "seed_patterns": {k: [list(p) for p in v] for k, v in self.patterns.items()}}


def refine(seed: QField, config: OracleConfig, ldg: LdGParams | None = None) -> QField:
    ldg = ldg or config.ldg
    relaxed = relax(seed, config, ldg)
    polished = newton_polish(relaxed.q, config, ldg)
    if not polished.converged:
        raise OracleError(f"newton polish failed: {polished.warning}")
    return polished.q


def is_diagonal(q: QField) -> bool:
    """Diagonal class: at the center the director is closer to a diagonal than to an axis."""
    c = q.M // 2
    return abs(q.q12[c, c]) > abs(q.q11[c, c])


def label_key(q: QField):
    """Sort key implementing the labelling convention.

    Diagonal states: D1 has the director along ``y = x`` at the center
    (``Q12 > 0``), D2 along ``y = -x``. Rotated states: horizontal interior
    director before vertical; within each, the sense of the pi rotation is the
    sign of the first moment of ``Q12`` across the rotating direction, positive
    first.
    """
    c = q.M // 2
    if is_diagonal(q):
        return (0, 0 if q.q12[c, c] > 0 else 1)
    t = np.linspace(0.0, 1.0, q.M) - 0.5
    horizontal = q.q11[c, c] > 0
    if horizontal:
        moment = float(np.sum(q.q12 * t[None, :]))
        return (1, 0, 0 if moment > 0 else 1)
    moment = float(np.sum(q.q12 * t[:, None]))
    return (1, 1, 0 if moment > 0 else 1)


def dedup(candidates, threshold: float):
    """Cluster ``(pattern, QField)`` pairs by full-field L2 distance.

    Candidates are processed in sorted pattern order so the result does not
    depend on the input order. Returns a list of ``(representative, patterns)``.
    """
    clusters = []
    for pattern, q in sorted(candidates, key=lambda item: item[0]):
        for cl in clusters:
            if cl[0].l2_distance(q) < threshold:
                cl[1].append(pattern)
                break
        else:
            clusters.append((q, [pattern]))
    return clusters


def label_solutions(clusters, ldg: LdGParams) -> SolutionSet:
    if len(clusters) != 6:
        found = [(label_key(q), len(p)) for q, p in clusters]
        raise OracleError(f"expected 6 distinct stable states, found {len(clusters)}: {found}")
    ordered = sorted(clusters, key=lambda cl: label_key(cl[0]))
    keys = [label_key(q) for q, _ in ordered]
    if len(set(keys)) != 6 or sum(k[0] == 0 for k in keys) != 2:
        raise OracleError(f"solutions do not split into 2 diagonal and 4 rotated states: {keys}")
    sols = {lab: q for lab, (q, _) in zip(LABELS, ordered)}
    pats = {lab: p for lab, (_, p) in zip(LABELS, ordered)}
    energies = {lab: energy(q, ldg) for lab, q in sols.items()}
    residuals = {lab: residual_inf_norm(q, ldg) for lab, q in sols.items()}
    D = np.array([[sols[a].l2_distance(sols[b]) for b in LABELS] for a in LABELS])
    return SolutionSet(sols, energies, residuals, D, pats)


def min_hessian_eigenvalue(q: QField, ldg: LdGParams) -> float:
    """Smallest eigenvalue of the discrete Jacobian (the scaled energy Hessian)."""
    n = q.M - 2
    J = jacobian_operator(q, ldg)
    x0 = np.cos(np.linspace(0.0, 3.0, 2 * n * n))[:, None]
    vals, _ = lobpcg(J, x0, M=_preconditioner(q.M, ldg), largest=False, tol=1e-8, maxiter=500)
    return float(vals[0])


def find_all(config: OracleConfig, ldg: LdGParams | None = None, patterns=None,
             keep_unstable: bool = False) -> SolutionSet:
    """Enumerate corner-jump seeds, refine each, keep the stable distinct states and label them.

    States whose discrete Hessian has a negative eigenvalue are discarded
    unless ``keep_unstable`` is set.
    """
    ldg = ldg or config.ldg
    if config.discovery == "deflation":
        return find_all_deflated(config, ldg)
    patterns = corner_patterns() if patterns is None else list(patterns)
    candidates = []
    for pat in patterns:
        seed = angle_seed([s * math.pi / 2 for s in pat], config)
        try:
            q = refine(seed, config, ldg)
        except OracleError as exc:
            log.warning("seed %s dropped: %s", pat, exc)
            continue
        candidates.append((tuple(pat), q))
    clusters = dedup(candidates, config.dedup_threshold)
    if not keep_unstable:
        clusters = [cl for cl in clusters if min_hessian_eigenvalue(cl[0], ldg) > 0.0]
    return label_solutions(clusters, ldg)


# ---------------------------------------------------------------- deflated Newton

def deflated_newton(q0: QField, known: list, config: OracleConfig, ldg: LdGParams,
                    power: float = 2.0, shift: float = 1.0) -> PolishResult:
    """Newton on ``m(Q) F(Q)`` with ``m = prod_i (|Q - Q_i|^-power + shift)``.

    The deflated step is the Newton step of ``F`` rescaled by
    ``1 / (1 - grad(log m) . step)``.
    """
    n = q0.M - 2
    h2 = q0.h**2
    precond = _preconditioner(q0.M, ldg)
    cur = q0.copy()
    history = []
    for step in range(config.max_newton_iters):
        f1, f2 = fd_residual(cur, ldg)
        F = np.concatenate([f1.ravel(), f2.ravel()])
        history.append(float(np.abs(F).max()))
        if history[-1] < config.newton_tol:
            return PolishResult(cur, True, step, history)
        delta, _ = minres(jacobian_operator(cur, ldg), -F, M=precond, rtol=config.krylov_tol, maxiter=2000)
        u = np.concatenate([cur.q11[1:-1, 1:-1].ravel(), cur.q12[1:-1, 1:-1].ravel()])
        glog = np.zeros_like(u)
        for kq in known:
            diff = u - np.concatenate([kq.q11[1:-1, 1:-1].ravel(), kq.q12[1:-1, 1:-1].ravel()])
            nrm2 = h2 * float(diff @ diff)
            m = nrm2 ** (-power / 2) + shift
            glog += (-power * nrm2 ** (-power / 2 - 1) * h2 * diff) / m
        denom = 1.0 - float(glog @ delta)
        scale = 1.0 / denom if abs(denom) > 1e-12 else 1.0
        delta = scale * delta
        # damping keeps the crude early steps inside the admissible range
        t = min(1.0, 0.5 / max(float(np.abs(delta).max()), 1e-300))
        da, db = delta.reshape(2, n, n)
        cur = _with_interior(cur, cur.q11[1:-1, 1:-1] + t * da, cur.q12[1:-1, 1:-1] + t * db)
        if not np.all(np.isfinite(cur.q11)):
            break
    return PolishResult(q0, False, len(history), history, "deflated newton did not converge")


def find_all_deflated(config: OracleConfig, ldg: LdGParams) -> SolutionSet:
    """Cross-check discovery: deflated Newton from relaxed seeds, deflating every state found so far."""
    found = []
    for pat in corner_patterns():
        seed = angle_seed([s * math.pi / 2 for s in pat], config)
        try:
            start = relax(seed, config, ldg).q
        except OracleError:
            continue
        res = deflated_newton(start, [q for _, q in found], config, ldg)
        if not res.converged:
            continue
        if all(res.q.l2_distance(q) >= config.dedup_threshold for _, q in found):
            found.append((tuple(pat), res.q))
    stable = [(p, q) for p, q in found if min_hessian_eigenvalue(q, ldg) > 0.0]
    return label_solutions(dedup(stable, config.dedup_threshold), ldg)
