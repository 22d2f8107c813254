"""Deflation-PINN field: shared tanh trunk, per-solution branch weights, hard constraint.

The trunk maps a point ``x`` in the plane to ``p`` features

    tau(x) = V tanh(W x + zeta) + U x + c

and solution ``k`` combines them with its branch row ``B[k] = (b1, b2)``:

    G1(k, x) = omega(x) * (b1 . tau(x)) + Qb(x)
    G2(k, x) = omega(x) * (b2 . tau(x))

Values, spatial gradients and Laplacians are available in closed form.
Solution indices are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import BoundaryConstants

PARAM_NAMES = ("W", "zeta", "V", "U", "c", "B")
CHECKPOINT_FORMAT = "defpinn-checkpoint/1"


@dataclass
class ModelConfig:
    hidden_width: int = 512
    feature_count: int = 16
    solution_count: int = 6
    init_seed: int = 0
    init_scheme: str = "glorot-uniform"

    def __post_init__(self):
        if self.hidden_width < 1 or self.feature_count < 1:
            raise ValueError("hidden_width and feature_count must be positive")
        if self.solution_count < 1:
            raise ValueError("solution_count must be positive")
        if self.init_scheme != "glorot-uniform":
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")


@dataclass
class ModelParams:
    """Full trainable state.

    Shapes: ``W (H, 2)``, ``zeta (H,)``, ``V (p, H)``, ``U (p, 2)``, ``c (p,)``,
    ``B (K, 2p)``. Row ``k`` of ``B`` is the branch vector of output 1
    (first ``p`` entries) followed by that of output 2.
    """

    W: np.ndarray
    zeta: np.ndarray
    V: np.ndarray
    U: np.ndarray
    c: np.ndarray
    B: np.ndarray

    @property
    def hidden_width(self) -> int:
        return self.W.shape[0]

    @property
    def feature_count(self) -> int:
        return self.V.shape[0]

    @property
    def solution_count(self) -> int:
        return self.B.shape[0]

    def items(self):
        return ((name, getattr(self, name)) for name in PARAM_NAMES)

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for _, a in self.items()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for _, a in self.items()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.items())


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases, branch rows uniform on ``[-1/sqrt(p), 1/sqrt(p)]``."""
    H, p, K = config.hidden_width, config.feature_count, config.solution_count
    rng = np.random.default_rng(config.init_seed)
    W = _glorot(rng, H, 2)
    V = _glorot(rng, p, H)
    U = _glorot(rng, p, 2)
    half = 1.0 / np.sqrt(p)
    B = rng.uniform(-half, half, size=(K, 2 * p))
    return ModelParams(W=W, zeta=np.zeros(H), V=V, U=U, c=np.zeros(p), B=B)


class TrunkCache(NamedTuple):
    X: np.ndarray
    s: np.ndarray      # tanh(z), (n, H)
    s1: np.ndarray     # 1 - s^2
    s2: np.ndarray     # -2 s s1
    wn: np.ndarray     # |w_h|^2, (H,)
    tau: np.ndarray    # (n, p)
    tau_grad: np.ndarray  # (n, p, 2)
    tau_lap: np.ndarray   # (n, p)


def trunk_forward(params: ModelParams, X: np.ndarray) -> TrunkCache:
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    n = X.shape[0]
    W = params.W
    s = np.tanh(X @ W.T + params.zeta)
    s1 = 1.0 - s * s
    s2 = -2.0 * s * s1
    wn = W[:, 0] ** 2 + W[:, 1] ** 2
    # one matmul for value, both partials and the Laplacian
    stacked = np.concatenate([s, s1 * W[:, 0], s1 * W[:, 1], s2 * wn], axis=0)
    out = stacked @ params.V.T
    tau = out[:n] + X @ params.U.T + params.c
    tau_grad = np.stack([out[n:2 * n] + params.U[:, 0], out[2 * n:3 * n] + params.U[:, 1]], axis=-1)
    tau_lap = out[3 * n:]
    return TrunkCache(X, s, s1, s2, wn, tau, tau_grad, tau_lap)


def trunk_eval(params: ModelParams, X):
    """Trunk features with their spatial gradient and Laplacian.

    Returns ``(tau, tau_grad, tau_lap)`` with shapes ``(n, p)``, ``(n, p, 2)``
    and ``(n, p)`` for an ``(n, 2)`` input. A single point may be passed as a
    length-2 sequence, in which case the leading axis is dropped.
    """
    single = np.ndim(X) == 1
    cache = trunk_forward(params, X)
    if single:
        return cache.tau[0], cache.tau_grad[0], cache.tau_lap[0]
    return cache.tau, cache.tau_grad, cache.tau_lap


@dataclass
class ConstrainedFieldEval:
    """Both components of ``G`` with gradients (trailing axis 2) and Laplacians."""

    g1: np.ndarray
    g2: np.ndarray
    grad1: np.ndarray
    grad2: np.ndarray
    lap1: np.ndarray
    lap2: np.ndarray


def branch_split(params: ModelParams):
    p = params.feature_count
    return params.B[:, :p], params.B[:, p:]


def compose(tau, tau_grad, tau_lap, branch: np.ndarray, bc: BoundaryConstants):
    """Hard-constraint composition for all solutions at once.

    ``branch`` is ``(K, 2p)``; returns a :class:`ConstrainedFieldEval` whose
    value and Laplacian arrays are ``(n, K)`` and gradients ``(n, K, 2)``.
    """
    p = tau.shape[1]
    b1, b2 = branch[:, :p], branch[:, p:]
    w = bc.omega_value[:, None]
    wg = bc.omega_gradient
    wl = bc.omega_laplacian[:, None]
    comps = []
    for b in (b1, b2):
        S = tau @ b.T
        gS = np.einsum("npd,kp->nkd", tau_grad, b)
        lS = tau_lap @ b.T
        g = w * S
        grad = wg[:, None, :] * S[:, :, None] + w[:, :, None] * gS
        lap = wl * S + 2.0 * np.einsum("nd,nkd->nk", wg, gS) + w * lS
        comps.append((g, grad, lap))
    (g1, grad1, lap1), (g2, grad2, lap2) = comps
    g1 = g1 + bc.qb_value[:, None]
    grad1 = grad1 + bc.qb_gradient[:, None, :]
    lap1 = lap1 + bc.qb_laplacian[:, None]
    return ConstrainedFieldEval(g1, g2, grad1, grad2, lap1, lap2)


def field_eval_all(params: ModelParams, X, bc: BoundaryConstants) -> ConstrainedFieldEval:
    cache = trunk_forward(params, X)
    return compose(cache.tau, cache.tau_grad, cache.tau_lap, params.B, bc)


def field_eval(params: ModelParams, k: int, X, bc: BoundaryConstants) -> ConstrainedFieldEval:
    """Field of solution ``k`` at the points ``X``; arrays have leading axis ``n``."""
    K = params.solution_count
    if not 0 <= k < K:
        raise IndexError(f"solution index {k} out of range for K={K}")
    cache = trunk_forward(params, X)
    ev = compose(cache.tau, cache.tau_grad, cache.tau_lap, params.B[k:k + 1], bc)
    return ConstrainedFieldEval(ev.g1[:, 0], ev.g2[:, 0], ev.grad1[:, 0], ev.grad2[:, 0],
                                ev.lap1[:, 0], ev.lap2[:, 0])


def field_values(params: ModelParams, X, qb_value, omega_value):
    """Values only, ``(g1, g2)`` each of shape ``(n, K)``; no derivatives needed."""
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    tau = np.tanh(X @ params.W.T + params.zeta) @ params.V.T + X @ params.U.T + params.c
    b1, b2 = branch_split(params)
    w = np.asarray(omega_value)[:, None]
    return w * (tau @ b1.T) + np.asarray(qb_value)[:, None], w * (tau @ b2.T)


def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict | None = None):
    """Write an ``.npz`` archive with the six named arrays and a JSON header."""
    header = {"format": CHECKPOINT_FORMAT, "model": asdict(config), **(extra or {})}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                 **{name: arr for name, arr in params.items()})


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, config, header)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a defpinn checkpoint")
        params = ModelParams(*(data[name].copy() for name in PARAM_NAMES))
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in header["model"].items() if k in known})
    return params, config, header
