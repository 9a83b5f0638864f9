"""Gradient-based model-predictive balance control.

Each tick the control sequence is optimized through the rolled-out model:
warm start from the previous solution shifted by one step, then a few
rounds of "compute the gradient of the loss through the rollout, try a
grid of learning rates, keep the best candidate".  The zero learning rate
is always in the grid, so the selected loss can never increase across
rounds.

The loss trades ZMP tracking against smoothness of the predicted tensions
and lengths and the size of the command.  Its terms are evaluated on
dimensionless sensor values: the ZMP is already normalized by the foot
geometry, and tensions/lengths are divided by their mean magnitudes from
training (their rest-state scale).  That keeps every term and its
gradient O(1), which is what the fixed weight presets and the
learning-rate grid assume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import DynamicsModel, HiddenState

THETA_MIN = -1.0
THETA_MAX = 1.0


@dataclass
class ControlConfig:
    n_step: int = 6          # control horizon (model expansions)
    n_batch: int = 10        # learning-rate candidates per round
    n_epoch: int = 3         # optimization rounds per tick
    gamma_max: float = 0.1
    c_f: float = 0.0         # predicted tension-change weight
    c_l: float = 30.0        # predicted length-change weight
    c_u: float = 3.0         # command-magnitude weight
    z_ref: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.n_step < 2:
            raise ValueError("n_step must be >= 2")
        if self.gamma_max <= 0:
            raise ValueError("gamma_max must be > 0")
        if min(self.c_f, self.c_l, self.c_u) < 0:
            raise ValueError("loss weights must be >= 0")


def gamma_grid(cc: ControlConfig) -> np.ndarray:
    """{0} plus a geometric ladder from gamma_max/100 up to gamma_max.

    A pure geometric split of [0, gamma_max] cannot contain 0, so 0 is added
    explicitly; it also makes the per-round selected loss provably
    non-increasing.
    """
    n_pos = cc.n_batch - 1
    ratio = 100.0 ** (-1.0 / (n_pos - 1))
    ladder = cc.gamma_max * ratio ** np.arange(n_pos - 1, -1, -1)
    return np.concatenate([[0.0], ladder])


def smoothness_diff(x: np.ndarray) -> np.ndarray:
    """Consecutive-step changes from the 2nd predicted step onward.

    One place owns this slice convention so it can be changed wholesale:
    for predictions x[0..N-1] it pairs x[2:] with x[1:-1], i.e. the change
    into steps 3..N of the 1-indexed horizon.
    """
    return x[..., 2:, :] - x[..., 1:-1, :]


def control_loss(z_pred, f_pred, l_pred, u_seq, cc: ControlConfig, z_ref_n) -> float:
    """Euclidean-norm composite loss over one predicted horizon.

    z/f/l come in normalized units with shape (n_step, dim); u_seq is the
    raw command sequence (n_step,).
    """
    z_term = np.linalg.norm(z_pred - z_ref_n)
    f_term = np.linalg.norm(smoothness_diff(f_pred))
    l_term = np.linalg.norm(smoothness_diff(l_pred))
    u_term = np.linalg.norm(u_seq)
    return float(z_term + cc.c_f * f_term + cc.c_l * l_term + cc.c_u * u_term)


def _norm_grad(residual):
    """Gradient of ||r||_2 w.r.t. r, with the 0 subgradient at r = 0."""
    n = np.linalg.norm(residual)
    if n == 0.0:
        return np.zeros_like(residual)
    return residual / n


def control_loss_grad(z_pred, f_pred, l_pred, u_seq, cc: ControlConfig, z_ref_n):
    """(d_z, d_f, d_l, d_u) matching control_loss term by term."""
    d_z = _norm_grad(z_pred - z_ref_n)
    d_f = np.zeros_like(f_pred)
    d_l = np.zeros_like(l_pred)
    df_pairs = _norm_grad(smoothness_diff(f_pred)) * cc.c_f
    dl_pairs = _norm_grad(smoothness_diff(l_pred)) * cc.c_l
    d_f[2:] += df_pairs
    d_f[1:-1] -= df_pairs
    d_l[2:] += dl_pairs
    d_l[1:-1] -= dl_pairs
    d_u = cc.c_u * _norm_grad(u_seq)
    return d_z, d_f, d_l, d_u


@dataclass
class TickLog:
    """One controller tick for the per-tick CSV log."""

    t: float
    s: np.ndarray
    u_init: np.ndarray
    u_opt: np.ndarray
    gammas: list
    losses: list
    fault: bool = False


class BalanceMpc:
    """Receding-horizon controller around a trained model.

    The LSTM hidden state persists across ticks within one episode (reset()
    starts a fresh one); every optimization rollout branches off the current
    hidden state without mutating it.
    """

    def __init__(self, model: DynamicsModel, p, cc: ControlConfig | None = None):
        self.model = model
        self.p = np.asarray(p, dtype=float).copy()
        self.cc = cc or ControlConfig()
        self.z_ref = np.asarray(self.cc.z_ref, dtype=float)
        # rest-state scales: ZMP is dimensionless as sensed, f/l are divided
        # by their mean magnitude so the loss sees O(1) values
        n_m = (model.dims.n_s - 2) // 2
        scale = np.ones(model.dims.n_s)
        scale[2:] = np.maximum(np.abs(model.normalizer.s_mean[2:]), 1e-6)
        self._loss_scale = scale
        self._n_m = n_m
        self._gammas = gamma_grid(self.cc)
        self.reset()

    def reset(self):
        self.u_prev: np.ndarray | None = None
        self.hidden = HiddenState.zeros(1)
        self.log: list[TickLog] = []

    def warm_start(self) -> np.ndarray:
        """Previous solution shifted one step with the last term replicated."""
        if self.u_prev is None:
            return np.zeros(self.cc.n_step)
        return np.concatenate([self.u_prev[1:], self.u_prev[-1:]])

    def _loss_states(self, preds_n):
        """Denormalize predictions and apply the rest-state scales."""
        raw = self.model.normalizer.denorm_s(preds_n)
        scaled = raw / self._loss_scale
        n_m = self._n_m
        return scaled[:, :2], scaled[:, 2:2 + n_m], scaled[:, 2 + n_m:]

    def _seq_loss(self, preds_n, u_seq) -> float:
        z, f, l = self._loss_states(preds_n)
        return control_loss(z, f, l, u_seq, self.cc, self.z_ref)

    def step(self, s_t) -> float:
        """Optimize the horizon from sensed state s_t and emit its first command."""
        cc = self.cc
        n_u = self.model.dims.n_u
        s0n = self.model.normalizer.norm_s(np.asarray(s_t, dtype=float))[None, :]
        p_row = self.p[None, :]
        u_init = self.warm_start()
        u_cur = u_init.copy()

        gammas_sel, losses_sel = [], []
        fault = False
        for _ in range(cc.n_epoch):
            # gradient of the composite loss through a recorded rollout
            u_n = self.model.normalizer.norm_u(u_cur[:, None])[None]
            preds_n, _, tape = self.model.run_closed_loop(
                s0n, u_n, p_row, self.hidden.copy())
            z, f, l = self._loss_states(preds_n[0])
            d_z, d_f, d_l, d_u_direct = control_loss_grad(z, f, l, u_cur, cc,
                                                          self.z_ref)
            # chain through the rest-state scaling and the denormalization
            d_scaled = np.concatenate([d_z, d_f, d_l], axis=1)
            d_preds = (d_scaled / self._loss_scale * self.model.normalizer.s_std)[None]
            grad = self.model.backward(tape, d_preds, targets=("u_seq",))["u_seq"]
            grad = grad[0, :, 0] + d_u_direct

            # learning-rate grid, each candidate clipped to the joint limits
            cand = u_cur[None, :] - self._gammas[:, None] * grad[None, :]
            cand = np.clip(cand, THETA_MIN, THETA_MAX)
            cand_n = self.model.normalizer.norm_u(cand[:, :, None])
            preds_b, _, _ = self.model.run_closed_loop(
                np.repeat(s0n, cc.n_batch, axis=0), cand_n,
                np.repeat(p_row, cc.n_batch, axis=0),
                self.hidden.tile(cc.n_batch), record=False)
            losses = np.array([self._seq_loss(preds_b[k], cand[k])
                               for k in range(cc.n_batch)])
            if not np.isfinite(losses).any():
                fault = True
                break
            losses = np.where(np.isfinite(losses), losses, np.inf)
            best = int(np.argmin(losses))
            u_cur = cand[best]
            gammas_sel.append(float(self._gammas[best]))
            losses_sel.append(float(losses[best]))

        if fault:
            u_cur = np.clip(u_init, THETA_MIN, THETA_MAX)
            gammas_sel = gammas_sel or [float("nan")]
            losses_sel = losses_sel or [float("nan")]

        u0 = float(u_cur[0])
        self.u_prev = u_cur
        # advance the persistent hidden state with what actually happened
        u0n = self.model.normalizer.norm_u(np.array([[u0]]))[None]
        _, self.hidden, _ = self.model.run_closed_loop(s0n, u0n, p_row,
                                                       self.hidden, record=False)
        self.log.append(TickLog(t=0.0, s=np.asarray(s_t, dtype=float).copy(),
                                u_init=u_init, u_opt=u_cur.copy(),
                                gammas=gammas_sel, losses=losses_sel, fault=fault))
        return u0


def save_controller_log(log: list[TickLog], path, n_epoch: int, tick_dt: float = 0.2):
    """Per-tick CSV: sensed state, warm start, solution, per-round gamma/loss."""
    if not log:
        raise ValueError("empty controller log")
    n_s = len(log[0].s)
    n_step = len(log[0].u_opt)
    header = (["t"] + [f"s{k}" for k in range(n_s)]
              + [f"u_init{k}" for k in range(n_step)]
              + [f"u_opt{k}" for k in range(n_step)]
              + [f"gamma{e}" for e in range(n_epoch)]
              + [f"loss{e}" for e in range(n_epoch)]
              + ["fault"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, row in enumerate(log):
            gam = list(row.gammas) + [float("nan")] * (n_epoch - len(row.gammas))
            los = list(row.losses) + [float("nan")] * (n_epoch - len(row.losses))
            writer.writerow([repr(i * tick_dt)]
                            + [repr(float(v)) for v in row.s]
                            + [repr(float(v)) for v in row.u_init]
                            + [repr(float(v)) for v in row.u_opt]
                            + [repr(float(v)) for v in gam]
                            + [repr(float(v)) for v in los]
                            + [int(row.fault)])
