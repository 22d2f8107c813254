"""Exact parameter gradients of the total loss, full-batch Adam and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .losses import (CollocationGrid, LdGParams, LossConfig, LossValue, build_grid, grid_values,
                     pairwise_distances, pde_residual, residual_of, residual_penalty, total_loss)
from .model import PARAM_NAMES, ModelParams, TrunkCache, field_eval_all, init_params, trunk_forward

if TYPE_CHECKING:
    from .config import RunConfig

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """A non-finite value appeared in the loss or its gradient."""

    def __init__(self, message: str, point: Optional[int] = None, group: Optional[str] = None):
        super().__init__(message)
        self.point = point
        self.group = group


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams, epoch: int):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


def trunk_backward(params: ModelParams, cache: TrunkCache, g_tau, g_tau_grad=None, g_tau_lap=None):
    """Pull adjoints of ``tau``, its gradient and its Laplacian back to the trunk weights.

    Returns a dict with entries for ``W, zeta, V, U, c``.
    """
    X, s, s1, s2, wn = cache.X, cache.s, cache.s1, cache.s2, cache.wn
    W, V = params.W, params.V
    n = X.shape[0]
    has_derivs = g_tau_grad is not None
    if has_derivs:
        adj = np.concatenate([g_tau, g_tau_grad[:, :, 0], g_tau_grad[:, :, 1], g_tau_lap], axis=0)
        prim = np.concatenate([s, s1 * W[:, 0], s1 * W[:, 1], s2 * wn], axis=0)
    else:
        adj, prim = g_tau, s
    gV = adj.T @ prim
    back = adj @ V
    gU = g_tau.T @ X
    gc = g_tau.sum(axis=0)
    gz = back[:n] * s1
    gW = np.zeros_like(W)
    if has_derivs:
        gU = gU + g_tau_grad.sum(axis=0)
        t0, t1, tl = back[n:2 * n], back[2 * n:3 * n], back[3 * n:]
        s3 = -2.0 * (s1 * s1 + s * s2)
        gz = gz + (t0 * W[:, 0] + t1 * W[:, 1]) * s2 + tl * (wn * s3)
        gW[:, 0] += (t0 * s1).sum(axis=0)
        gW[:, 1] += (t1 * s1).sum(axis=0)
        gW += 2.0 * W * (tl * s2).sum(axis=0)[:, None]
    gW += gz.T @ X
    return {"W": gW, "zeta": gz.sum(axis=0), "V": gV, "U": gU, "c": gc}


def _deflation_adjoint(g1, g2, weights, cfg: LossConfig, scale: float):
    """Adjoint of ``scale * deflation`` with respect to the grid values ``(g1, g2)``."""
    K = g2.shape[1]
    D = pairwise_distances(g1, g2, weights, cfg.deflation_components)
    a1 = np.zeros_like(g1)
    a2 = np.zeros_like(g2)
    coef = scale * 2.0 / (K * (K - 1)) / cfg.d_min
    for i in range(K):
        for j in range(i + 1, K):
            dist = D[i, j]
            # inactive hinge or coincident solutions: subgradient taken as 0
            if dist >= cfg.d_min or dist == 0.0:
                continue
            diff2 = weights * (g2[:, i] - g2[:, j]) * (coef / dist)
            a2[:, i] -= diff2
            a2[:, j] += diff2
            if cfg.deflation_components == "both":
                diff1 = weights * (g1[:, i] - g1[:, j]) * (coef / dist)
                a1[:, i] -= diff1
                a1[:, j] += diff1
    return a1, a2, D


def _check_finite(arr, what: str, group: Optional[str] = None):
    bad = ~np.isfinite(arr)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        point = int(idx[0]) if arr.ndim else None
        raise NonFiniteError(f"non-finite {what} at point {point}", point=point, group=group)


def loss_gradient(params: ModelParams, grid: CollocationGrid, ldg: LdGParams, cfg: LossConfig):
    """Total loss and its exact gradient with respect to every parameter group.

    Returns ``(LossValue, grad)`` where ``grad`` is a :class:`ModelParams`.
    """
    cache = trunk_forward(params, grid.points)
    tau, tg, tl = cache.tau, cache.tau_grad, cache.tau_lap
    bc = grid.bc
    p = params.feature_count
    K = params.solution_count
    branches = (params.B[:, :p], params.B[:, p:])
    w = bc.omega_value[:, None]
    wg = bc.omega_gradient
    wl = bc.omega_laplacian[:, None]

    S, dS, LS, G, L = [], [], [], [], []
    for m, b in enumerate(branches):
        S.append(tau @ b.T)
        dS.append(np.einsum("npd,kp->nkd", tg, b))
        LS.append(tl @ b.T)
        G.append(w * S[m])
        L.append(wl * S[m] + 2.0 * np.einsum("nd,nkd->nk", wg, dS[m]) + w * LS[m])
    G[0] = G[0] + bc.qb_value[:, None]
    L[0] = L[0] + bc.qb_laplacian[:, None]
    r1, r2 = pde_residual(G[0], G[1], L[0], L[1], ldg)
    _check_finite(r1, "residual (component 1)")
    _check_finite(r2, "residual (component 2)")

    interior_scale = cfg.alpha
    if cfg.soft_boundary is not None:
        interior_scale = cfg.alpha * cfg.soft_boundary[0]
    per = grid.weights @ residual_penalty(r1, r2, cfg.residual_norm)

    wt = grid.weights[:, None] * interior_scale
    if cfg.residual_norm == "l1":
        a_r1, a_r2 = wt * np.sign(r1), wt * np.sign(r2)
    else:
        a_r1, a_r2 = wt * 2.0 * r1, wt * 2.0 * r2
    bulk = 2.0 * (1.0 - G[0] ** 2 - G[1] ** 2)
    cross = -4.0 * G[0] * G[1]
    aG = [a_r1 * (bulk - 4.0 * G[0] ** 2) + a_r2 * cross,
          a_r1 * cross + a_r2 * (bulk - 4.0 * G[1] ** 2)]
    e2 = ldg.epsilon**2
    aL = [e2 * a_r1, e2 * a_r2]

    if K > 1:
        d1, d2, D = _deflation_adjoint(G[0], G[1], grid.weights, cfg, cfg.beta)
        aG[0] = aG[0] + d1
        aG[1] = aG[1] + d2
        iu = np.triu_indices(K, 1)
        deflation = 2.0 / (K * (K - 1)) * np.maximum(1.0 - D[iu] / cfg.d_min, 0.0).sum()
    else:
        deflation = 0.0

    g_tau = np.zeros_like(tau)
    g_tg = np.zeros_like(tg)
    g_tl = np.zeros_like(tl)
    gB = np.zeros_like(params.B)
    for m, b in enumerate(branches):
        aS = w * aG[m] + wl * aL[m]
        adS = 2.0 * wg[:, None, :] * aL[m][:, :, None]
        aLS = w * aL[m]
        g_tau += aS @ b
        g_tg += np.einsum("nkd,kp->npd", adS, b)
        g_tl += aLS @ b
        gB[:, m * p:(m + 1) * p] = aS.T @ tau + np.einsum("nkd,npd->kp", adS, tg) + aLS.T @ tl
    grads = trunk_backward(params, cache, g_tau, g_tg, g_tl)

    if cfg.soft_boundary is not None and grid.boundary_points.shape[0]:
        a2w = cfg.alpha * cfg.soft_boundary[1]
        bcache = trunk_forward(params, grid.boundary_points)
        Sb = [bcache.tau @ b.T for b in branches]
        bw = grid.boundary_weights[:, None]
        mis = bw * ((Sb[0] - grid.boundary_q1[:, None]) ** 2 + Sb[1] ** 2)
        per = cfg.soft_boundary[0] * per + cfg.soft_boundary[1] * mis.sum(axis=0)
        aSb = [a2w * bw * 2.0 * (Sb[0] - grid.boundary_q1[:, None]), a2w * bw * 2.0 * Sb[1]]
        gb_tau = aSb[0] @ branches[0] + aSb[1] @ branches[1]
        for m in range(2):
            gB[:, m * p:(m + 1) * p] += aSb[m].T @ bcache.tau
        for name, g in trunk_backward(params, bcache, gb_tau).items():
            grads[name] = grads[name] + g

    grad = ModelParams(B=gB, **grads)
    for name, arr in grad.items():
        _check_finite(arr, "gradient", group=name)
    value = cfg.alpha * per.sum() + cfg.beta * deflation
    return LossValue(value, per, deflation), grad


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    epochs: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8
    schedule: str = "constant"
    gamma: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam moment constants must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.schedule not in ("constant", "exponential"):
            raise ValueError("schedule must be 'constant' or 'exponential'")
        if self.schedule == "exponential" and not 0 < self.gamma <= 1:
            raise ValueError("exponential decay needs 0 < gamma <= 1")

    def lr_at(self, step: int) -> float:
        """Learning rate of the ``step``-th update (0-based)."""
        if self.schedule == "exponential":
            return self.learning_rate * self.gamma**step
        return self.learning_rate


@dataclass
class AdamState:
    first_moment: ModelParams
    second_moment: ModelParams
    step_count: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_update(x, g, m, v, step: int, opt: OptimizerConfig):
    """One bias-corrected Adam update of a single array; ``step`` is the 1-based count."""
    m = opt.beta1 * m + (1.0 - opt.beta1) * g
    v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
    mhat = m / (1.0 - opt.beta1**step)
    vhat = v / (1.0 - opt.beta2**step)
    x = x - opt.lr_at(step - 1) * mhat / (np.sqrt(vhat) + opt.eps_stability)
    return x, m, v


def adam_step(state: AdamState, params: ModelParams, grad: ModelParams, opt: OptimizerConfig):
    """Return ``(new_params, new_state)``; inputs are not modified."""
    step = state.step_count + 1
    new_x, new_m, new_v = {}, {}, {}
    for name in PARAM_NAMES:
        new_x[name], new_m[name], new_v[name] = adam_update(
            getattr(params, name), getattr(grad, name), getattr(state.first_moment, name),
            getattr(state.second_moment, name), step, opt)
    return ModelParams(**new_x), AdamState(ModelParams(**new_m), ModelParams(**new_v), step)


@dataclass
class TrainReport:
    total: float
    piml_per_solution: list
    deflation: float
    epochs_run: int
    seed: int
    distance_matrix: list
    history: list = field(default_factory=list, repr=False)
    wall_clock: float = 0.0
    timing: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        """JSON-ready summary; wall-clock time and the history are kept out for reproducibility."""
        return {"total": float(self.total), "piml_per_solution": [float(v) for v in self.piml_per_solution],
                "deflation": float(self.deflation), "epochs_run": self.epochs_run, "seed": self.seed,
                "distance_matrix": self.distance_matrix}


def history_header(K: int) -> list[str]:
    return ["epoch", "total"] + [f"piml_{k}" for k in range(K)] + ["deflation"]


def train(run: "RunConfig", callback: Optional[Callable[[int, LossValue], None]] = None,
          initial: Optional[ModelParams] = None):
    """Full-batch Adam on the total loss; returns ``(params, TrainReport)``.

    History row ``e`` holds the losses of the parameters used for the ``e``-th
    update. The report's final losses are evaluated after the last update.
    On a non-finite loss or gradient :class:`TrainingDiverged` is raised with
    the last finite parameters attached. ``initial`` overrides the seeded
    initialization.
    """
    ldg, cfg, opt = run.ldg, run.loss, run.optimizer
    grid = build_grid(run.grid.N, run.grid.delta, ldg.trapezoid, offset=run.grid.offset,
                      h_fd=run.grid.h_fd, hard_constraint=cfg.hard_constraint)
    params = init_params(run.model) if initial is None else initial.copy()
    state = AdamState.zeros(params)
    history = []
    wall = []
    t0 = time.perf_counter()
    for epoch in range(1, opt.epochs + 1):
        try:
            lv, grad = loss_gradient(params, grid, ldg, cfg)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc} (group {exc.group})", params, epoch) from exc
        if not np.isfinite(lv.value):
            raise TrainingDiverged(f"epoch {epoch}: non-finite loss", params, epoch)
        history.append([epoch, float(lv.value), *map(float, lv.piml_per_solution), float(lv.deflation)])
        wall.append(time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, lv)
        new_params, state = adam_step(state, params, grad, opt)
        if not new_params.all_finite():
            raise TrainingDiverged(f"epoch {epoch}: non-finite parameters after update", params, epoch)
        params = new_params
    final = total_loss(params, grid, ldg, cfg)
    g1, g2 = grid_values(params, grid)
    D = pairwise_distances(g1, g2, grid.weights, cfg.deflation_components)
    report = TrainReport(float(final.value), [float(v) for v in final.piml_per_solution],
                         float(final.deflation), opt.epochs, run.model.init_seed,
                         D.tolist(), history, time.perf_counter() - t0, wall)
    return params, report


def _random_params(run: "RunConfig", trial: int) -> ModelParams:
    params = init_params(replace(run.model, init_seed=run.model.init_seed + trial))
    rng = np.random.default_rng(10_000 + run.model.init_seed + trial)
    # non-zero biases so that every parameter path carries gradient
    params.zeta = rng.uniform(-0.5, 0.5, size=params.zeta.shape)
    params.c = rng.uniform(-0.5, 0.5, size=params.c.shape)
    return params


def gradient_check(run: "RunConfig", trials: int = 20, rel_step: float = 1e-6) -> float:
    """Worst relative error between :func:`loss_gradient` and central differences.

    Differences are taken of :func:`defpinn.losses.total_loss` in extended
    precision. In l1 mode collocation points where any residual is below
    ``1e-6`` are dropped, since the penalty is not differentiable there.
    Entries with magnitude at most ``1e-10`` are skipped.
    """
    if run.model.hidden_width > 16 or run.grid.N > 7:
        raise ValueError("gradient_check is limited to H <= 16 and N <= 7")
    ldg, cfg = run.ldg, run.loss
    base_grid = build_grid(run.grid.N, run.grid.delta, ldg.trapezoid, offset=run.grid.offset,
                           h_fd=run.grid.h_fd, hard_constraint=cfg.hard_constraint)
    worst = 0.0
    for trial in range(trials):
        params = _random_params(run, trial)
        grid = base_grid
        if cfg.residual_norm == "l1":
            grid = _drop_residual_zeros(params, base_grid, ldg)
        _, grad = loss_gradient(params, grid, ldg, cfg)
        ext = ModelParams(*(a.astype(np.longdouble) for _, a in params.items()))
        for name, g in grad.items():
            arr = getattr(ext, name)
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                if abs(gflat[i]) <= 1e-10:
                    continue
                orig = flat[i]
                h = np.longdouble(rel_step) * max(np.longdouble(1.0), abs(orig))
                flat[i] = orig + h
                fp = total_loss(ext, grid, ldg, cfg).value
                flat[i] = orig - h
                fm = total_loss(ext, grid, ldg, cfg).value
                flat[i] = orig
                fd = float((fp - fm) / (2 * h))
                err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]))
                worst = max(worst, err)
    return worst


def _drop_residual_zeros(params: ModelParams, grid: CollocationGrid, ldg: LdGParams,
                         threshold: float = 1e-6) -> CollocationGrid:
    r1, r2 = residual_of(field_eval_all(params, grid.points, grid.bc), ldg)
    keep = np.all((np.abs(r1) >= threshold) & (np.abs(r2) >= threshold), axis=1)
    if keep.all():
        return grid
    return CollocationGrid(grid.points[keep], grid.weights[keep], grid.bc.subset(keep), grid.N, grid.delta,
                           grid.boundary_points, grid.boundary_weights, grid.boundary_q1)
