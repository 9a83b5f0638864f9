"""Dense and LSTM kernels with hand-written reverse-mode companions.

The predictive network is a single fixed stack, so there is no general
autodiff here: each kernel comes as a forward / forward-with-cache /
backward triple and the model composes them explicitly (see model.py).
All math is float64.  Forward functions accept a plain vector or a
(batch, dim) matrix; the backward functions work on the batched form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteGradientError",
    "DenseParams",
    "LstmParams",
    "dense_init",
    "lstm_init",
    "sigmoid",
    "fc_forward",
    "fc_forward_cache",
    "fc_backward",
    "lstm_step",
    "lstm_step_cache",
    "lstm_backward",
    "mse_loss",
    "mse_loss_grad",
    "Adam",
    "MomentumSgd",
]


class DimensionError(ValueError):
    """Input shape does not match the layer's declared dimensions."""


class NonFiniteGradientError(ValueError):
    """A gradient contained NaN or inf; the update was refused."""


def sigmoid(x):
    """Logistic function via tanh, stable for large |x|."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class DenseParams:
    """Weights of one fully connected layer: y = act(W x + b)."""

    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"inconsistent dense shapes {self.W.shape} / {self.b.shape}")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise ValueError("dense parameters must be finite")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


GATE_NAMES = ("i", "f", "g", "o")


class LstmParams:
    """Per-gate weights of one LSTM layer (input, forget, candidate, output).

    Storage is gate-packed for speed: W (4H, in), U (4H, H), b (4H,) in
    i/f/g/o order.  The per-gate names (Wi, Uf, bo, ...) remain available
    as zero-copy views, so in-place optimizer updates stay visible.
    """

    def __init__(self, Wi, Wf, Wg, Wo, Ui, Uf, Ug, Uo, bi, bf, bg, bo):
        self.W = np.ascontiguousarray(np.concatenate(
            [np.asarray(a, dtype=float) for a in (Wi, Wf, Wg, Wo)], axis=0))
        self.U = np.ascontiguousarray(np.concatenate(
            [np.asarray(a, dtype=float) for a in (Ui, Uf, Ug, Uo)], axis=0))
        self.b = np.ascontiguousarray(np.concatenate(
            [np.asarray(a, dtype=float) for a in (bi, bf, bg, bo)]))
        n_h4 = self.W.shape[0]
        if n_h4 % 4 or self.U.shape != (n_h4, n_h4 // 4) or self.b.shape != (n_h4,):
            raise DimensionError("inconsistent lstm gate shapes")
        if not (np.isfinite(self.W).all() and np.isfinite(self.U).all()
                and np.isfinite(self.b).all()):
            raise ValueError("lstm parameters must be finite")

    @classmethod
    def from_packed(cls, W, U, b) -> "LstmParams":
        n_h = np.asarray(W).shape[0] // 4
        pieces = {}
        for k, g in enumerate(GATE_NAMES):
            pieces["W" + g] = np.asarray(W)[k * n_h:(k + 1) * n_h]
            pieces["U" + g] = np.asarray(U)[k * n_h:(k + 1) * n_h]
            pieces["b" + g] = np.asarray(b)[k * n_h:(k + 1) * n_h]
        return cls(**pieces)

    def gates(self) -> dict[str, np.ndarray]:
        """Per-gate views keyed Wi..bo (the constructor's keyword names)."""
        return {p + g: getattr(self, p + g) for p in ("W", "U", "b")
                for g in GATE_NAMES}

    def _gate_view(self, packed, idx):
        n_h = self.n_hidden
        return packed[idx * n_h:(idx + 1) * n_h]

    def __getattr__(self, name):
        if len(name) == 2 and name[0] in "WUb" and name[1] in GATE_NAMES:
            packed = object.__getattribute__(self, name[0])
            return self._gate_view(packed, GATE_NAMES.index(name[1]))
        raise AttributeError(name)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[0] // 4


def dense_init(n_out: int, n_in: int, rng: np.random.Generator) -> DenseParams:
    """Uniform init in +-1/sqrt(fan_in); keeps tanh units near their linear range."""
    bound = 1.0 / np.sqrt(n_in)
    return DenseParams(
        W=rng.uniform(-bound, bound, size=(n_out, n_in)),
        b=np.zeros(n_out),
    )


def lstm_init(n_hidden: int, n_in: int, rng: np.random.Generator) -> LstmParams:
    bw = 1.0 / np.sqrt(n_in)
    bu = 1.0 / np.sqrt(n_hidden)
    kw = {}
    for g in "ifgo":
        kw["W" + g] = rng.uniform(-bw, bw, size=(n_hidden, n_in))
        kw["U" + g] = rng.uniform(-bu, bu, size=(n_hidden, n_hidden))
        kw["b" + g] = np.zeros(n_hidden)
    return LstmParams(**kw)


# ---------------------------------------------------------------------------
# fully connected layer


def fc_forward(x, params: DenseParams, activation: str = "tanh"):
    """act(W x + b) for a vector or a (batch, in) matrix.  Pure."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.n_in:
        raise DimensionError(f"expected input dim {params.n_in}, got {x.shape[-1]}")
    z = x @ params.W.T + params.b
    if activation == "tanh":
        return np.tanh(z)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def fc_forward_cache(x, params: DenseParams, activation: str = "tanh"):
    y = fc_forward(x, params, activation)
    return y, (np.asarray(x, dtype=float), y, activation)


def fc_backward(dy, cache, params: DenseParams, with_param_grads: bool = True):
    """Returns (dx, dW, db); dW/db are None when param grads are skipped."""
    x, y, activation = cache
    dz = dy * (1.0 - y * y) if activation == "tanh" else dy
    dx = dz @ params.W
    if not with_param_grads:
        return dx, None, None
    return dx, dz.T @ x, dz.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM cell


def _lstm_gates(x, h_prev, params: LstmParams):
    """Pre-activations for all four gates in one pair of matmuls."""
    z = x @ params.W.T + h_prev @ params.U.T + params.b
    n_h = params.n_hidden
    i = sigmoid(z[..., :n_h])
    f = sigmoid(z[..., n_h:2 * n_h])
    g = np.tanh(z[..., 2 * n_h:3 * n_h])
    o = sigmoid(z[..., 3 * n_h:])
    return i, f, g, o


def lstm_step(x, h_prev, c_prev, params: LstmParams):
    """One LSTM update with sigmoid gates and tanh squashing.  Pure."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.n_in:
        raise DimensionError(f"expected input dim {params.n_in}, got {x.shape[-1]}")
    h_prev = np.asarray(h_prev, dtype=float)
    c_prev = np.asarray(c_prev, dtype=float)
    if h_prev.shape[-1] != params.n_hidden or c_prev.shape[-1] != params.n_hidden:
        raise DimensionError("hidden state dim mismatch")
    i, f, g, o = _lstm_gates(x, h_prev, params)
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_step_cache(x, h_prev, c_prev, params: LstmParams):
    x = np.asarray(x, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    c_prev = np.asarray(c_prev, dtype=float)
    i, f, g, o = _lstm_gates(x, h_prev, params)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc)


def lstm_backward(dh, dc, cache, params: LstmParams, with_param_grads: bool = True):
    """BPTT step for one cell.

    dh/dc are the gradients flowing into this step's outputs (from the layer
    above plus the next time step).  Returns (dx, dh_prev, dc_prev, grads)
    where grads carries the packed W/U/b arrays, or is None.
    """
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc_tot = dc + dh * o * (1.0 - tc * tc)
    di = dc_tot * g
    df = dc_tot * c_prev
    dg = dc_tot * i
    dc_prev = dc_tot * f
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=-1)
    dx = dz @ params.W
    dh_prev = dz @ params.U
    grads = None
    if with_param_grads:
        grads = {"W": dz.T @ x, "U": dz.T @ h_prev, "b": dz.sum(axis=0)}
    return dx, dh_prev, dc_prev, grads


# ---------------------------------------------------------------------------
# loss


def mse_loss(pred, target) -> float:
    """Mean over all elements of squared differences."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss on empty input")
    d = pred - target
    return float(np.mean(d * d))


def mse_loss_grad(pred, target) -> np.ndarray:
    """d(mse)/d(pred)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss on empty input")
    return 2.0 * (pred - target) / pred.size


# ---------------------------------------------------------------------------
# optimizers


def _check_grads(params: dict, grads: dict):
    for key, g in grads.items():
        if key not in params:
            raise KeyError(f"gradient for unknown parameter {key!r}")
        if np.shape(g) != np.shape(params[key]):
            raise DimensionError(f"gradient shape mismatch for {key!r}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for {key!r}")


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    kind = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        _check_grads(params, grads)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[key] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


class MomentumSgd:
    """Classical momentum: v <- mu v + lr g; p <- p - v."""

    kind = "momentum_sgd"

    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.t = 0
        self.vel: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        _check_grads(params, grads)
        self.t += 1
        for key, g in grads.items():
            if key not in self.vel:
                self.vel[key] = np.zeros_like(params[key])
            v = self.vel[key]
            v *= self.momentum
            v += self.lr * g
            params[key] -= v
        return params
