"""Offline training: windowed episodes, joint weight + bias optimization.

Episodes are cut into overlapping windows (stride 1).  Within a window the
model is teacher forced: every recorded (s_t, u_t) predicts s_{t+1}, with
the LSTM state carried across the window from a zero start.  The network
weights and one bias vector per body-state label are updated together by
the same Adam instance; the bias vectors start at zero.  The loss is the
mean squared error in normalized units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .collect import Episode
from .model import DynamicsModel, ModelDims, Normalizer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    window: int = 10          # ticks per training window (2 s)
    batch_size: int = 64
    epochs: int = 300
    lr: float = 1e-3
    val_fraction: float = 0.1
    seed: int = 0
    n_p: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 20   # epochs without improvement before halving lr
    max_lr_halvings: int = 2

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if not 0.0 <= self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in [0, 0.5)")


@dataclass
class WindowSet:
    """Flattened training windows with their label and source episode."""

    states: np.ndarray        # (N, W, n_s) raw units
    controls: np.ndarray      # (N, W, n_u)
    label_idx: np.ndarray     # (N,)
    episode_idx: np.ndarray   # (N,)
    labels: list[str]

    def __len__(self) -> int:
        return len(self.states)

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.states[idx], self.controls[idx],
                         self.label_idx[idx], self.episode_idx[idx], self.labels)


def build_windows(episodes: list[Episode], window: int) -> WindowSet:
    """Overlapping stride-1 windows; episodes shorter than one window are skipped."""
    labels: list[str] = []
    for ep in episodes:
        if ep.label not in labels:
            labels.append(ep.label)
    states, controls, lab_idx, ep_idx = [], [], [], []
    for e, ep in enumerate(episodes):
        if len(ep) < window:
            log.warning("episode %s (%d ticks) shorter than window %d; skipped",
                        ep.label, len(ep), window)
            continue
        li = labels.index(ep.label)
        for start in range(len(ep) - window + 1):
            states.append(ep.states[start:start + window])
            controls.append(ep.controls[start:start + window])
            lab_idx.append(li)
            ep_idx.append(e)
    if not states:
        raise ValueError("no usable windows: every episode is shorter than the window")
    return WindowSet(np.asarray(states), np.asarray(controls),
                     np.asarray(lab_idx), np.asarray(ep_idx), labels)


def split_windows(ws: WindowSet, val_fraction: float) -> tuple[WindowSet, WindowSet]:
    """Hold out the tail windows of every episode (contiguous, no shuffling)."""
    if val_fraction <= 0.0:
        return ws, ws.subset(np.zeros(0, dtype=int))
    train_idx, val_idx = [], []
    for e in np.unique(ws.episode_idx):
        idx = np.flatnonzero(ws.episode_idx == e)
        n_val = int(np.ceil(val_fraction * len(idx)))
        train_idx.extend(idx[:-n_val] if n_val else idx)
        val_idx.extend(idx[len(idx) - n_val:])
    return ws.subset(np.asarray(train_idx, dtype=int)), \
        ws.subset(np.asarray(val_idx, dtype=int))


def _batch_loss(model: DynamicsModel, ws: WindowSet, idx, train: bool):
    """Teacher-forced window loss; returns grads when training."""
    s_n = model.normalizer.norm_s(ws.states[idx])
    u_n = model.normalizer.norm_u(ws.controls[idx])
    p_rows = model.pb[ws.label_idx[idx]]
    inputs_s, inputs_u = s_n[:, :-1], u_n[:, :-1]
    targets = s_n[:, 1:]
    preds, _, tape = model.run_teacher_forced(inputs_s, inputs_u, p_rows, record=train)
    loss = nn.mse_loss(preds, targets)
    if not train:
        return loss, None
    d_preds = nn.mse_loss_grad(preds, targets)
    grads = model.backward(tape, d_preds, targets=("weights", "pb"))
    pb_grad = np.zeros_like(model.pb)
    np.add.at(pb_grad, ws.label_idx[idx], grads["pb"])
    flat = dict(grads["weights"])
    flat["pb"] = pb_grad
    return loss, flat


def train_model(episodes: list[Episode], tc: TrainConfig) -> tuple[DynamicsModel, list[dict]]:
    """Train a model on labeled episodes; returns (model, per-epoch history)."""
    if not episodes:
        raise ValueError("no episodes to train on")
    windows = build_windows(episodes, tc.window)
    train_ws, val_ws = split_windows(windows, tc.val_fraction)
    norm = Normalizer.fit(train_ws.states.reshape(-1, train_ws.states.shape[-1]),
                          train_ws.controls.reshape(-1, train_ws.controls.shape[-1]))
    dims = ModelDims(n_s=windows.states.shape[-1], n_u=windows.controls.shape[-1],
                     n_p=tc.n_p)
    n_m = (dims.n_s - 2) // 2
    meta = {
        "seed": tc.seed, "n_m": n_m, "window": tc.window, "epochs": tc.epochs,
        "lr": tc.lr, "batch_size": tc.batch_size,
        "adam": [tc.adam_beta1, tc.adam_beta2, tc.adam_eps],
    }
    model = DynamicsModel.init_random(dims, seed=tc.seed, labels=windows.labels,
                                      normalizer=norm, meta=meta)
    params = dict(model.params)
    params["pb"] = model.pb  # shared array: Adam updates it in place
    opt = nn.Adam(lr=tc.lr, beta1=tc.adam_beta1, beta2=tc.adam_beta2, eps=tc.adam_eps)
    rng = np.random.default_rng(tc.seed)

    history: list[dict] = []
    best = np.inf
    stale = 0
    halvings = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(len(train_ws))
        total = 0.0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            loss, grads = _batch_loss(model, train_ws, idx, train=True)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}; "
                    "inspect the dataset for outliers")
            opt.step(params, grads)
            total += loss * len(idx)
        train_loss = total / len(train_ws)
        if len(val_ws):
            val_loss, _ = _batch_loss(model, val_ws, np.arange(len(val_ws)), train=False)
        else:
            val_loss = float("nan")
        history.append({"epoch": epoch, "lr": opt.lr,
                        "train_loss": float(train_loss), "val_loss": float(val_loss)})

        monitored = val_loss if len(val_ws) else train_loss
        if monitored < best - 1e-9:
            best = monitored
            stale = 0
        else:
            stale += 1
            if stale > tc.plateau_patience and halvings < tc.max_lr_halvings:
                opt.lr *= 0.5
                halvings += 1
                stale = 0
                log.info("epoch %d: plateau, lr halved to %g", epoch, opt.lr)
    return model, history


def evaluate_model(model: DynamicsModel, ws: WindowSet, horizon: int = 6) -> dict:
    """Per-dimension RMSE of one-step and closed-loop horizon predictions."""
    if len(ws) == 0:
        raise ValueError("empty evaluation window set")
    s_n = model.normalizer.norm_s(ws.states)
    u_n = model.normalizer.norm_u(ws.controls)
    p_rows = model.pb[ws.label_idx]

    preds_n, _, _ = model.run_teacher_forced(s_n[:, :-1], u_n[:, :-1], p_rows,
                                             record=False)
    preds = model.normalizer.denorm_s(preds_n)
    err1 = preds - ws.states[:, 1:]
    one_step = np.sqrt(np.mean(err1 ** 2, axis=(0, 1)))

    h = min(horizon, ws.states.shape[1] - 1)
    preds_n, _, _ = model.run_closed_loop(s_n[:, 0], u_n[:, :h], p_rows, record=False)
    err_h = model.normalizer.denorm_s(preds_n) - ws.states[:, 1:h + 1]
    rollout = np.sqrt(np.mean(err_h ** 2, axis=(0, 1)))

    return {"one_step_rmse": one_step, "rollout_rmse": rollout, "horizon": h}
