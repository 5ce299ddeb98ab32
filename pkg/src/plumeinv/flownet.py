"""Residual flow-map network on reduced coordinates.

The surrogate advances reduced state ``c`` one output interval::

    N(c, z, w) = c + dt * E(c, z, w)

where ``E`` is a dense ELU network. Inputs are standardised with fixed
per-feature constants and outputs rescaled per component; both are frozen at
construction so ``E`` works on O(1) quantities. Derivatives (parameter
gradients for training, input Jacobians for inversion) are written out by
hand.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, Diverged
from .reduction import PcaBasis, reconstruct

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class FlowNetParams:
    """Weights ``W[k]`` (fan_in, fan_out), biases ``b[k]`` and fixed scalings."""

    weights: list
    biases: list
    dt: float
    in_shift: np.ndarray
    in_scale: np.ndarray
    out_scale: np.ndarray
    r: int
    r_w: int
    activation: str = "elu"

    @property
    def width(self) -> int:
        return self.weights[0].shape[1] if len(self.weights) > 1 else 0

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def n_in(self) -> int:
        return self.r + 1 + self.r_w

    def flat(self) -> np.ndarray:
        """Trainable parameters as one vector (layer by layer, W then b)."""
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, xi: np.ndarray) -> "FlowNetParams":
        xi = np.asarray(xi, float)
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(xi[k : k + W.size].reshape(W.shape))
            k += W.size
            bs.append(xi[k : k + b.size].copy())
            k += b.size
        if k != xi.size:
            raise DimensionMismatch(f"expected {k} parameters, got {xi.size}")
        return replace(self, weights=Ws, biases=bs)

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class TrainConfig:
    P: int = 25
    epochs: int = 20000
    learning_rate: float = 8e-4
    decay_rate: float = 0.04
    decay_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    width: int = 200
    depth: int = 2
    minibatch: int | None = None
    validate_every: int = 50

    def __post_init__(self):
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.decay_rate < 0 or self.decay_rate >= 1:
            raise ValueError("invalid learning rate schedule")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")


@dataclass
class ReducedDataset:
    """Reduced trajectories ``C (M, N+1, r)``, sources ``Z (M, N)`` and winds ``Wr (M, N, r_w)``."""

    C: np.ndarray
    Z: np.ndarray
    Wr: np.ndarray

    def __post_init__(self):
        self.C = np.asarray(self.C, float)
        self.Z = np.asarray(self.Z, float)
        self.Wr = np.asarray(self.Wr, float)
        M, N1, _ = self.C.shape
        if self.Z.shape != (M, N1 - 1) or self.Wr.shape[:2] != (M, N1 - 1):
            raise DimensionMismatch("inconsistent reduced dataset shapes")

    @property
    def M(self) -> int:
        return self.C.shape[0]

    @property
    def N(self) -> int:
        return self.C.shape[1] - 1


def glorot_init(shape, seed) -> np.ndarray:
    """Uniform Glorot weights on ``+-sqrt(6 / (fan_in + fan_out))``."""
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return np.random.default_rng(seed).uniform(-bound, bound, size=shape)


def feature_scaling(data: ReducedDataset, dt: float):
    """Input shift/scale and output scale fitted to a training set.

    Each input is centred on its mean. State coordinates share one scale
    (their RMS spread) and so do wind coordinates, so low-energy PCA modes
    are not inflated to unit variance. Rollout errors in those modes would
    otherwise be amplified at the network input. Outputs share one scale
    the same way.
    """
    r, r_w = data.C.shape[2], data.Wr.shape[2]
    X = _stack_inputs(data.C[:, :-1], data.Z, data.Wr).reshape(-1, r + 1 + r_w)
    shift = X.mean(axis=0)
    sd = X.std(axis=0)
    scale = np.empty_like(sd)
    scale[:r] = np.sqrt(np.mean(sd[:r] ** 2))
    scale[r] = sd[r]
    scale[r + 1 :] = np.sqrt(np.mean(sd[r + 1 :] ** 2))
    rates = ((data.C[:, 1:] - data.C[:, :-1]) / dt).reshape(-1, r)
    out = np.full(r, np.sqrt(np.mean(rates.std(axis=0) ** 2)))
    return shift, _floor(scale), _floor(out)


def _floor(s):
    s = np.array(s, float)
    ref = s.max() if s.size and s.max() > 0 else 1.0
    s[s < 1e-12 * ref] = ref if ref > 0 else 1.0
    return s


def init_params(
    r: int,
    r_w: int,
    *,
    width: int = 200,
    depth: int = 2,
    dt: float = 0.5,
    seed=0,
    scaling=None,
    activation: str = "elu",
) -> FlowNetParams:
    n_in = r + 1 + r_w
    sizes = [n_in] + [width] * depth + [r]
    ss = np.random.SeedSequence(seed)
    seeds = ss.spawn(len(sizes) - 1)
    Ws = [glorot_init((a, b), s) for a, b, s in zip(sizes[:-1], sizes[1:], seeds)]
    bs = [np.zeros(b) for b in sizes[1:]]
    if scaling is None:
        scaling = (np.zeros(n_in), np.ones(n_in), np.ones(r))
    shift, scale, out = (np.asarray(a, float) for a in scaling)
    return FlowNetParams(Ws, bs, float(dt), shift, scale, out, r, r_w, activation)


# ---------------------------------------------------------------------------
# forward pass and derivatives


def _act(a, kind):
    if kind == "linear":
        return a
    # expm1(a) >= a for a <= 0, so the max picks the right branch
    return np.maximum(a, np.expm1(np.minimum(a, 0.0)))


def _dact(a, kind):
    if kind == "linear":
        return np.ones_like(a)
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


def _dact_from(a, h, kind):
    # ELU'(a) = ELU(a) + 1 on the negative branch
    if kind == "linear":
        return 1.0
    d = h + 1.0
    d[a > 0] = 1.0
    return d


def _stack_inputs(c, z, w):
    c = np.asarray(c, float)
    z = np.asarray(z, float)
    w = np.asarray(w, float)
    return np.concatenate([c, z[..., None], w], axis=-1)


def _check(c, w, p: FlowNetParams):
    if np.shape(c)[-1] != p.r or np.shape(w)[-1] != p.r_w:
        raise DimensionMismatch(
            f"network expects r={p.r}, r_w={p.r_w}; got {np.shape(c)[-1]}, {np.shape(w)[-1]}"
        )


def _mlp(xhat, p: FlowNetParams, keep=False):
    """Network body on standardised inputs.

    Returns the output and the pre-activations; with ``keep`` also the
    hidden activations (input first) for reuse in the backward pass.
    """
    pre = []
    hs = [xhat]
    h = xhat
    for W, b in zip(p.weights[:-1], p.biases[:-1]):
        a = h @ W
        a += b
        pre.append(a)
        h = _act(a, p.activation)
        hs.append(h)
    out = h @ p.weights[-1] + p.biases[-1]
    return (out, pre, hs) if keep else (out, pre)


def residual(c, z, w, p: FlowNetParams):
    """The learned rate ``E(c, z, w)``."""
    _check(c, w, p)
    xhat = (_stack_inputs(c, z, w) - p.in_shift) / p.in_scale
    o, _ = _mlp(xhat, p)
    return p.out_scale * o


def net_forward(c, z, w, p: FlowNetParams):
    """One surrogate step ``c + dt * E(c, z, w)``. Leading axes broadcast as a batch."""
    return np.asarray(c, float) + p.dt * residual(c, z, w, p)


def _point_jacobian(c, z, w, p: FlowNetParams):
    _check(c, w, p)
    x = _stack_inputs(c, z, w)
    if x.ndim != 1:
        raise DimensionMismatch("Jacobians take a single (unbatched) point")
    xhat = (x - p.in_shift) / p.in_scale
    o, pre = _mlp(xhat, p)
    # J = diag(out) Wo^T D_k W_k^T ... D_1 W_1^T diag(1/in_scale), built right to left
    J = p.weights[0].T / p.in_scale
    for k, a in enumerate(pre):
        J = _dact(a, p.activation)[:, None] * J
        J = p.weights[k + 1].T @ J
    J = (p.dt * p.out_scale)[:, None] * J
    nxt = np.asarray(c, float) + p.dt * p.out_scale * o
    return nxt, J


def net_jacobians(c, z, w, p: FlowNetParams):
    """Input Jacobians of one step at a single point.

    Returns ``(dN/dc (r, r), dN/dz (r,), dN/dw (r, r_w))``; ``dN/dc``
    includes the identity from the residual connection.
    """
    _, J = _point_jacobian(c, z, w, p)
    r = p.r
    return J[:, :r] + np.eye(r), J[:, r], J[:, r + 1 :]


def step_with_jacobians(c, z, w, p: FlowNetParams):
    """One step plus ``dN/dc`` and ``dN/dz`` from a single pass."""
    nxt, J = _point_jacobian(c, z, w, p)
    r = p.r
    return nxt, J[:, :r] + np.eye(r), J[:, r]


def compose(c0, zs, ws, p: FlowNetParams):
    """Apply the step ``len(zs)`` times with the per-step parameters in order."""
    zs = np.asarray(zs, float)
    ws = np.asarray(ws, float)
    if len(zs) < 1 or len(ws) != len(zs):
        raise ValueError("need p >= 1 matching source and wind steps")
    c = np.asarray(c0, float)
    for zj, wj in zip(zs, ws):
        c = net_forward(c, zj, wj, p)
    return c


def rollout(c0, zs, ws, p: FlowNetParams):
    """All composed states ``c_0 .. c_n``; batched over leading axes of ``c0``.

    ``zs`` is ``(..., n)`` and ``ws`` is ``(..., n, r_w)``.
    """
    zs = np.asarray(zs, float)
    ws = np.asarray(ws, float)
    n = zs.shape[-1]
    c = np.asarray(c0, float)
    out = np.empty(c.shape[:-1] + (n + 1, c.shape[-1]))
    out[..., 0, :] = c
    for j in range(n):
        c = net_forward(c, zs[..., j], ws[..., j, :], p)
        out[..., j + 1, :] = c
    return out


# ---------------------------------------------------------------------------
# loss and gradient


def _anchors(data: ReducedDataset, idx=None):
    """Anchor (trajectory, start) pairs sorted by start index ascending."""
    M, N = data.M, data.N
    ii, nn = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
    ii, nn = ii.ravel(), nn.ravel()
    if idx is not None:
        ii, nn = ii[idx], nn[idx]
    order = np.lexsort((ii, nn))
    return ii[order], nn[order]


def _loss_and_grad(data: ReducedDataset, p: FlowNetParams, P: int, anchors=None, want_grad=True):
    ii, nn = _anchors(data) if anchors is None else anchors
    N = data.N
    kind = p.activation
    c = data.C[ii, nn]
    steps = []
    total = 0.0
    for q in range(1, P + 1):
        active = int(np.searchsorted(nn, N - q, side="right"))
        if active == 0:
            break
        c = c[:active]
        ia, na = ii[:active], nn[:active]
        x = np.concatenate([c, data.Z[ia, na + q - 1][:, None], data.Wr[ia, na + q - 1]], axis=1)
        xhat = (x - p.in_shift) / p.in_scale
        if want_grad:
            o, pre, hs = _mlp(xhat, p, keep=True)
        else:
            o, pre = _mlp(xhat, p)
        c = c + p.dt * p.out_scale * o
        diff = c - data.C[ia, na + q]
        total += float(np.einsum("ij,ij->", diff, diff))
        if want_grad:
            steps.append((pre, hs, diff))
    if not want_grad:
        return total, None

    gW = [np.zeros_like(W) for W in p.weights]
    gb = [np.zeros_like(b) for b in p.biases]
    r = p.r
    carry = None
    for pre, hs, diff in reversed(steps):
        g = 2.0 * diff
        if carry is not None:
            g[: len(carry)] += carry
        delta = g * (p.dt * p.out_scale)
        for k in range(len(p.weights) - 1, -1, -1):
            gW[k] += hs[k].T @ delta
            gb[k] += delta.sum(axis=0)
            delta = delta @ p.weights[k].T
            if k > 0:
                delta *= _dact_from(pre[k - 1], hs[k], kind)
        carry = g + delta[:, :r] / p.in_scale[:r]
    grad = np.concatenate([a.ravel() for pair in zip(gW, gb) for a in pair])
    return total, grad


def loss(data: ReducedDataset, p: FlowNetParams, P: int) -> float:
    """Sum over trajectories, anchors and horizons of squared composed-prediction errors.

    The horizon at anchor ``n`` is truncated to ``min(P, N - n)``.
    """
    return _loss_and_grad(data, p, P, want_grad=False)[0]


def loss_gradient(data: ReducedDataset, p: FlowNetParams, P: int) -> np.ndarray:
    """Exact gradient of :func:`loss` w.r.t. the flat parameter vector."""
    return _loss_and_grad(data, p, P)[1]


def loss_and_gradient(data: ReducedDataset, p: FlowNetParams, P: int, anchors=None):
    return _loss_and_grad(data, p, P, anchors=anchors)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Staircase exponential decay: ``lr0 * (1 - decay)^(epoch // decay_every)``."""
    return config.learning_rate * (1.0 - config.decay_rate) ** (epoch // config.decay_every)


def adam_step(xi, grad, state: AdamState, config: TrainConfig, epoch: int):
    """One bias-corrected ADAM update; returns the new parameters and state."""
    t = state.t + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grad
    v = config.beta2 * state.v + (1 - config.beta2) * grad * grad
    mhat = m / (1 - config.beta1**t)
    vhat = v / (1 - config.beta2**t)
    xi = xi - learning_rate(config, epoch) * mhat / (np.sqrt(vhat) + config.eps)
    return xi, AdamState(m, v, t)


@dataclass
class ValidationSet:
    """Full-state trajectories ``U (M, N+1, m)`` with their reduced inputs."""

    U: np.ndarray
    Z: np.ndarray
    Wr: np.ndarray
    basis: PcaBasis


def validation_error(val: ValidationSet, p: FlowNetParams) -> float:
    """Mean over trajectories and steps ``n = 1..N`` of the squared relative l2 error
    between ``u_n`` and the reconstructed ``n``-fold composition from ``c_0``.
    """
    U = np.asarray(val.U, float)
    M, N1, _ = U.shape
    N = N1 - 1
    c0 = (U[:, 0] - val.basis.mean) @ val.basis.basis
    C = rollout(c0, val.Z, val.Wr, p)
    total = 0.0
    for i in range(M):
        pred = reconstruct(C[i, 1:], val.basis)
        num = np.sum((U[i, 1:] - pred) ** 2, axis=1)
        den = np.sum(U[i, 1:] ** 2, axis=1)
        total += float(np.sum(num / den))
    return total / (M * N)


@dataclass
class TrainResult:
    params: FlowNetParams
    history: np.ndarray  # (epochs, 2): epoch, loss
    validation: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    best_epoch: int = 0


def train(
    data: ReducedDataset,
    config: TrainConfig,
    validation: ValidationSet | None = None,
    *,
    init: FlowNetParams | None = None,
    dt: float | None = None,
) -> TrainResult:
    """Fit the surrogate with ADAM on the composed-prediction loss.

    With a validation set the returned parameters are those with the lowest
    validation error seen (checked every ``validate_every`` epochs and at the
    end); otherwise the final iterate is returned.
    """
    if init is None:
        if dt is None:
            raise ValueError("dt is required when no initial parameters are given")
        init = init_params(
            data.C.shape[2],
            data.Wr.shape[2],
            width=config.width,
            depth=config.depth,
            dt=dt,
            seed=config.seed,
            scaling=feature_scaling(data, dt),
        )
    p = init
    xi = p.flat()
    state = AdamState.zeros(xi.size)
    rng = np.random.default_rng([config.seed, 1])
    n_anchor = data.M * data.N
    history = np.zeros((config.epochs, 2))
    val_hist = []
    best = (np.inf, xi.copy(), 0)

    def check(epoch, xi):
        nonlocal best
        err = validation_error(validation, p.with_flat(xi))
        val_hist.append((epoch, err))
        if err < best[0]:
            best = (err, xi.copy(), epoch)

    for epoch in range(config.epochs):
        if validation is not None and epoch % config.validate_every == 0:
            check(epoch, xi)
        if config.minibatch and config.minibatch < n_anchor:
            perm = rng.permutation(n_anchor)
            batches = [perm[k : k + config.minibatch] for k in range(0, n_anchor, config.minibatch)]
        else:
            batches = [None]
        ep_loss = 0.0
        for idx in batches:
            anchors = _anchors(data, idx) if idx is not None else None
            val, grad = _loss_and_grad(data, p.with_flat(xi), config.P, anchors=anchors)
            if not np.isfinite(val):
                raise Diverged(f"loss became non-finite at epoch {epoch}")
            ep_loss += val
            xi, state = adam_step(xi, grad, state, config, epoch)
        history[epoch] = (epoch, ep_loss)
        if epoch % 1000 == 0:
            log.debug("epoch %d loss %.6e", epoch, ep_loss)
    if validation is None:
        return TrainResult(p.with_flat(xi), history)
    check(config.epochs, xi)
    err, xi_best, ep = best
    return TrainResult(p.with_flat(xi_best), history, np.array(val_hist), ep)
