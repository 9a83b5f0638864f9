"""Online adaptation of the parametric bias with frozen network weights.

A FIFO buffer keeps the latest (s, u) pairs.  Once it is full, every new
observation triggers one MomentumSGD step on the bias alone: the buffer is
treated as a single contiguous sequence starting from a zero hidden state,
teacher forced, one epoch, one batch.  Updating only the low-dimensional
bias lets the model track the current body state indefinitely without
overfitting the weights.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .model import DynamicsModel

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    lr: float = 0.01
    momentum: float = 0.9
    threshold: int = 50   # buffer length that starts the updates
    capacity: int = 50    # FIFO size; older pairs are dropped

    def __post_init__(self):
        if self.threshold < 2 or self.capacity < self.threshold:
            raise ValueError("need capacity >= threshold >= 2")


class OnlineAdapter:
    """Sequential bias estimator; the model's weights are never touched."""

    def __init__(self, model: DynamicsModel, p0=None, cfg: AdaptConfig | None = None):
        self.model = model
        self.cfg = cfg or AdaptConfig()
        self.p = (np.zeros(model.dims.n_p) if p0 is None
                  else np.asarray(p0, dtype=float).copy())
        self._buf_s: list[np.ndarray] = []
        self._buf_u: list[np.ndarray] = []
        self._opt = nn.MomentumSgd(lr=self.cfg.lr, momentum=self.cfg.momentum)
        self.updates = 0
        self.history: list[dict] = []

    def __len__(self) -> int:
        return len(self._buf_s)

    @property
    def buffer(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self._buf_s), np.asarray(self._buf_u)

    def observe(self, s, u) -> None:
        """Append one (s, u) pair; runs one bias update once the buffer is full."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if s.shape != (self.model.dims.n_s,) or u.shape != (self.model.dims.n_u,):
            raise nn.DimensionError("observation does not match the model dims")
        self._buf_s.append(s)
        self._buf_u.append(u)
        if len(self._buf_s) > self.cfg.capacity:
            del self._buf_s[0]
            del self._buf_u[0]
        if len(self._buf_s) >= self.cfg.threshold:
            self.update_pb()

    def update_pb(self) -> float:
        """One teacher-forced epoch over the whole buffer, bias-only step."""
        if len(self._buf_s) < self.cfg.threshold:
            raise RuntimeError("buffer below the update threshold")
        s_n = self.model.normalizer.norm_s(np.asarray(self._buf_s))[None]
        u_n = self.model.normalizer.norm_u(np.asarray(self._buf_u))[None]
        preds, _, tape = self.model.run_teacher_forced(
            s_n[:, :-1], u_n[:, :-1], self.p[None])
        loss = nn.mse_loss(preds, s_n[:, 1:])
        d_preds = nn.mse_loss_grad(preds, s_n[:, 1:])
        grad = self.model.backward(tape, d_preds, targets=("pb",))["pb"][0]
        try:
            self._opt.step({"p": self.p}, {"p": grad})
        except nn.NonFiniteGradientError:
            log.warning("skipping bias update %d: non-finite gradient", self.updates)
            return float(loss)
        self.updates += 1
        self.history.append({"update": self.updates, "p": self.p.copy(),
                             "buffer_loss": float(loss)})
        return float(loss)


def save_history(history: list[dict], path, n_p: int = 2) -> None:
    """Bias trajectory CSV: update index, components, buffer loss."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["update"] + [f"p{k}" for k in range(n_p)] + ["buffer_loss"])
        for row in history:
            writer.writerow([row["update"]]
                            + [repr(float(v)) for v in row["p"]]
                            + [repr(row["buffer_loss"])])
