"""Recurrent sensor-dynamics model with a parametric-bias input.

The network maps (s_t, u_t, p) to s_{t+1} where s stacks ZMP, muscle
tensions and muscle lengths, u is the ankle pitch command and p is a small
constant vector in which differences between dynamics regimes self-organize
during training.  The stack is fixed: four tanh FC layers, two LSTM layers,
four FC layers with a linear output.  Inputs and outputs are normalized
per dimension; rollouts feed predictions back in normalized space.

Gradients (for training, for adapting p online and for optimizing control
sequences) come from an explicit backward pass over a recorded rollout;
there is no autodiff framework underneath.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import DimensionError

CKPT_MAGIC = b"BLABCKPT"
CKPT_VERSION = 1

FC_IN_WIDTHS = (200, 100, 30)
LSTM_UNITS = 30
FC_OUT_WIDTHS = (30, 100, 200)

GRAD_TARGETS = ("weights", "pb", "u_seq")


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, truncated, or has the wrong version."""


@dataclass(frozen=True)
class ModelDims:
    """Sensor/control/bias dimensions; the layer widths follow from these."""

    n_s: int
    n_u: int = 1
    n_p: int = 2

    @property
    def n_in(self) -> int:
        return self.n_s + self.n_u + self.n_p

    def unit_chain(self) -> list[int]:
        """Output width of each of the ten layers, first to last."""
        return [self.n_in, *FC_IN_WIDTHS, LSTM_UNITS, LSTM_UNITS, *FC_OUT_WIDTHS, self.n_s]


@dataclass
class Normalizer:
    """Per-dimension affine scaling for sensor states and commands."""

    s_mean: np.ndarray
    s_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray

    STD_FLOOR = 1e-6

    def __post_init__(self):
        for name in ("s_mean", "s_std", "u_mean", "u_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.s_std <= 0) or np.any(self.u_std <= 0):
            raise ValueError("normalizer stds must be positive")

    @classmethod
    def fit(cls, s_rows, u_rows) -> "Normalizer":
        s_rows = np.asarray(s_rows, dtype=float).reshape(-1, np.shape(s_rows)[-1])
        u_rows = np.asarray(u_rows, dtype=float).reshape(-1, np.shape(u_rows)[-1])
        return cls(
            s_mean=s_rows.mean(axis=0),
            s_std=np.maximum(s_rows.std(axis=0), cls.STD_FLOOR),
            u_mean=u_rows.mean(axis=0),
            u_std=np.maximum(u_rows.std(axis=0), cls.STD_FLOOR),
        )

    @classmethod
    def identity(cls, n_s: int, n_u: int) -> "Normalizer":
        return cls(np.zeros(n_s), np.ones(n_s), np.zeros(n_u), np.ones(n_u))

    def norm_s(self, s):
        return (np.asarray(s, dtype=float) - self.s_mean) / self.s_std

    def denorm_s(self, sn):
        return np.asarray(sn, dtype=float) * self.s_std + self.s_mean

    def norm_u(self, u):
        return (np.asarray(u, dtype=float) - self.u_mean) / self.u_std


@dataclass
class HiddenState:
    """(h, c) pairs for both LSTM layers, batch-major."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, batch: int = 1) -> "HiddenState":
        return cls([(np.zeros((batch, LSTM_UNITS)), np.zeros((batch, LSTM_UNITS)))
                    for _ in range(2)])

    @property
    def batch(self) -> int:
        return self.layers[0][0].shape[0]

    def copy(self) -> "HiddenState":
        return HiddenState([(h.copy(), c.copy()) for h, c in self.layers])

    def tile(self, n: int) -> "HiddenState":
        """Replicate a batch-1 state across n batch rows."""
        return HiddenState([(np.repeat(h, n, axis=0), np.repeat(c, n, axis=0))
                            for h, c in self.layers])


@dataclass
class Tape:
    """Record of one forward sequence, consumed by DynamicsModel.backward."""

    mode: str                     # "teacher" or "closed"
    steps: list                   # per step: (fc_in caches, lstm caches, fc_out caches)
    batch: int
    n_steps: int


class DynamicsModel:
    """The predictive model plus its normalization and trained bias vectors.

    A loaded model is immutable for inference purposes and can be shared;
    every rollout owns its tape and hidden state.
    """

    def __init__(self, dims: ModelDims, fc_in, lstms, fc_out, normalizer: Normalizer,
                 pb_labels=(), pb=None, meta=None):
        self.dims = dims
        self.fc_in = list(fc_in)
        self.lstms = list(lstms)
        self.fc_out = list(fc_out)
        self.normalizer = normalizer
        self.pb_labels = list(pb_labels)
        self.pb = (np.zeros((len(self.pb_labels), dims.n_p)) if pb is None
                   else np.asarray(pb, dtype=float))
        if self.pb.shape != (len(self.pb_labels), dims.n_p):
            raise DimensionError("pb table shape does not match labels")
        self.meta = dict(meta or {})
        self._check_architecture()

    # -- construction -------------------------------------------------------

    @classmethod
    def init_random(cls, dims: ModelDims, seed: int = 0, labels=(),
                    normalizer: Normalizer | None = None, meta=None) -> "DynamicsModel":
        rng = np.random.default_rng(seed)
        chain = dims.unit_chain()
        fc_in = [nn.dense_init(chain[k], chain[k - 1] if k else dims.n_in, rng)
                 for k in range(4)]
        lstms = [nn.lstm_init(LSTM_UNITS, chain[3], rng),
                 nn.lstm_init(LSTM_UNITS, LSTM_UNITS, rng)]
        fc_out = [nn.dense_init(chain[6 + k], chain[5 + k], rng) for k in range(4)]
        norm = normalizer or Normalizer.identity(dims.n_s, dims.n_u)
        meta = dict(meta or {})
        meta.setdefault("seed", seed)
        labels = list(labels)
        return cls(dims, fc_in, lstms, fc_out, norm,
                   pb_labels=labels, pb=np.zeros((len(labels), dims.n_p)), meta=meta)

    def _check_architecture(self):
        chain = self.dims.unit_chain()
        widths = [p.n_out for p in self.fc_in] + [p.n_hidden for p in self.lstms] \
            + [p.n_out for p in self.fc_out]
        if widths != chain:
            raise DimensionError(f"layer widths {widths} do not match the required chain {chain}")
        if self.fc_in[0].n_in != self.dims.n_in:
            raise DimensionError("first layer input width mismatch")

    @property
    def params(self) -> dict[str, np.ndarray]:
        """Flat name->array view of all weights (arrays are shared, not copied)."""
        out = {}
        for k, p in enumerate(self.fc_in):
            out[f"fc_in{k}.W"] = p.W
            out[f"fc_in{k}.b"] = p.b
        for k, p in enumerate(self.lstms):
            out[f"lstm{k}.W"] = p.W
            out[f"lstm{k}.U"] = p.U
            out[f"lstm{k}.b"] = p.b
        for k, p in enumerate(self.fc_out):
            out[f"fc_out{k}.W"] = p.W
            out[f"fc_out{k}.b"] = p.b
        return out

    def pb_for(self, label: str) -> np.ndarray:
        try:
            idx = self.pb_labels.index(label)
        except ValueError:
            raise KeyError(f"no trained parametric bias for label {label!r}") from None
        return self.pb[idx].copy()

    # -- forward ------------------------------------------------------------

    def _step(self, x, hidden: HiddenState, record: bool):
        """One pass through the stack on normalized input x (batch, n_in)."""
        fc_in_caches = []
        a = x
        for p in self.fc_in:
            if record:
                a, cache = nn.fc_forward_cache(a, p, "tanh")
                fc_in_caches.append(cache)
            else:
                a = nn.fc_forward(a, p, "tanh")
        lstm_caches = []
        new_layers = []
        for k, p in enumerate(self.lstms):
            h_prev, c_prev = hidden.layers[k]
            if record:
                h, c, cache = nn.lstm_step_cache(a, h_prev, c_prev, p)
                lstm_caches.append(cache)
            else:
                h, c = nn.lstm_step(a, h_prev, c_prev, p)
            new_layers.append((h, c))
            a = h
        fc_out_caches = []
        for k, p in enumerate(self.fc_out):
            act = "linear" if k == 3 else "tanh"
            if record:
                a, cache = nn.fc_forward_cache(a, p, act)
                fc_out_caches.append(cache)
            else:
                a = nn.fc_forward(a, p, act)
        caches = (fc_in_caches, lstm_caches, fc_out_caches) if record else None
        return a, HiddenState(new_layers), caches

    def _validate_su(self, s, u):
        if np.shape(s)[-1] != self.dims.n_s:
            raise DimensionError(f"sensor dim {np.shape(s)[-1]} != {self.dims.n_s}")
        if np.shape(u)[-1] != self.dims.n_u:
            raise DimensionError(f"control dim {np.shape(u)[-1]} != {self.dims.n_u}")
        if not (np.isfinite(s).all() and np.isfinite(u).all()):
            raise ValueError("non-finite model input")

    def predict_step(self, s, u, p, hidden: HiddenState | None = None):
        """One-step prediction in raw units.  Returns (s_next, new_hidden)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        self._validate_su(s, u)
        if p.shape[-1] != self.dims.n_p:
            raise DimensionError(f"pb dim {p.shape[-1]} != {self.dims.n_p}")
        hidden = HiddenState.zeros(1) if hidden is None else hidden
        x = np.concatenate([self.normalizer.norm_s(s), self.normalizer.norm_u(u), p])
        y, new_hidden, _ = self._step(x[None, :], hidden, record=False)
        return self.normalizer.denorm_s(y[0]), new_hidden

    def rollout(self, s, u_seq, p, hidden: HiddenState | None = None) -> np.ndarray:
        """Closed-loop expansion: feed each prediction back as the next input.

        Returns the predicted states for the next len(u_seq) ticks in raw
        units.  The caller's hidden state is not mutated.
        """
        u_seq = np.asarray(u_seq, dtype=float).reshape(-1, self.dims.n_u)
        if len(u_seq) < 1:
            raise ValueError("rollout needs at least one control input")
        s = np.atleast_1d(np.asarray(s, dtype=float))
        self._validate_su(s, u_seq)
        hidden = HiddenState.zeros(1) if hidden is None else hidden.copy()
        s0n = self.normalizer.norm_s(s)[None, :]
        un = self.normalizer.norm_u(u_seq)[None, :, :]
        p_rows = np.asarray(p, dtype=float).reshape(1, self.dims.n_p)
        preds, _, _ = self.run_closed_loop(s0n, un, p_rows, hidden, record=False)
        return self.normalizer.denorm_s(preds[0])

    # -- recorded sequence runners (normalized space) ------------------------

    def run_teacher_forced(self, s_seq_n, u_seq_n, p_rows, hidden: HiddenState | None = None,
                           record: bool = True):
        """Predict s_{t+1} for every recorded (s_t, u_t); no feedback.

        s_seq_n: (B, T, n_s) normalized inputs, u_seq_n: (B, T, n_u),
        p_rows: (B, n_p).  Returns (preds (B, T, n_s), hidden, tape|None).
        """
        B, T, _ = s_seq_n.shape
        hidden = HiddenState.zeros(B) if hidden is None else hidden
        preds = np.empty((B, T, self.dims.n_s))
        steps = []
        for t in range(T):
            x = np.concatenate([s_seq_n[:, t], u_seq_n[:, t], p_rows], axis=1)
            y, hidden, caches = self._step(x, hidden, record)
            preds[:, t] = y
            if record:
                steps.append(caches)
        tape = Tape("teacher", steps, B, T) if record else None
        return preds, hidden, tape

    def run_closed_loop(self, s0_n, u_seq_n, p_rows, hidden: HiddenState | None = None,
                        record: bool = True):
        """Feed predictions back as inputs.  s0_n: (B, n_s), u_seq_n: (B, T, n_u)."""
        B, T, _ = u_seq_n.shape
        hidden = HiddenState.zeros(B) if hidden is None else hidden
        preds = np.empty((B, T, self.dims.n_s))
        steps = []
        s_cur = s0_n
        for t in range(T):
            x = np.concatenate([s_cur, u_seq_n[:, t], p_rows], axis=1)
            y, hidden, caches = self._step(x, hidden, record)
            preds[:, t] = y
            s_cur = y
            if record:
                steps.append(caches)
        tape = Tape("closed", steps, B, T) if record else None
        return preds, hidden, tape

    # -- backward ------------------------------------------------------------

    def backward(self, tape: Tape, d_preds_n, targets=("weights",)):
        """Gradients of a scalar loss through a recorded sequence.

        d_preds_n: (B, T, n_s) gradient of the loss w.r.t. the normalized
        predictions.  targets selects what to return: any subset of
        {"weights", "pb", "u_seq"}.  u_seq gradients are converted to raw
        command units.  Parametric-bias gradients are returned per batch row.
        """
        targets = tuple(targets)
        if not targets:
            raise ValueError("empty gradient target set")
        for t in targets:
            if t not in GRAD_TARGETS:
                raise ValueError(f"unknown gradient target {t!r}")
        if tape is None or not tape.steps:
            raise RuntimeError("backward called without a recorded forward pass")
        want_w = "weights" in targets
        n_s, n_u, n_p = self.dims.n_s, self.dims.n_u, self.dims.n_p
        B, T = tape.batch, tape.n_steps
        d_preds_n = np.asarray(d_preds_n, dtype=float)
        if d_preds_n.shape != (B, T, n_s):
            raise DimensionError("d_preds shape mismatch")

        wgrads = {k: np.zeros_like(v) for k, v in self.params.items()} if want_w else None
        d_pb = np.zeros((B, n_p))
        d_u = np.zeros((B, T, n_u))
        # gradient flowing into each LSTM layer's (h, c) from the next time step
        carry = [(np.zeros((B, LSTM_UNITS)), np.zeros((B, LSTM_UNITS))) for _ in range(2)]
        ds_feedback = np.zeros((B, n_s))

        for t in range(T - 1, -1, -1):
            fc_in_caches, lstm_caches, fc_out_caches = tape.steps[t]
            dy = d_preds_n[:, t] + (ds_feedback if tape.mode == "closed" else 0.0)
            da = dy
            for k in range(3, -1, -1):
                da, dW, db = nn.fc_backward(da, fc_out_caches[k], self.fc_out[k], want_w)
                if want_w:
                    wgrads[f"fc_out{k}.W"] += dW
                    wgrads[f"fc_out{k}.b"] += db
            for k in range(1, -1, -1):
                dh = da + carry[k][0]
                dc = carry[k][1]
                da, dh_prev, dc_prev, grads = nn.lstm_backward(
                    dh, dc, lstm_caches[k], self.lstms[k], want_w)
                carry[k] = (dh_prev, dc_prev)
                if want_w:
                    for name, g in grads.items():
                        wgrads[f"lstm{k}.{name}"] += g
            for k in range(3, -1, -1):
                da, dW, db = nn.fc_backward(da, fc_in_caches[k], self.fc_in[k], want_w)
                if want_w:
                    wgrads[f"fc_in{k}.W"] += dW
                    wgrads[f"fc_in{k}.b"] += db
            ds_feedback = da[:, :n_s]
            d_u[:, t] = da[:, n_s:n_s + n_u]
            d_pb += da[:, n_s + n_u:]

        out = {}
        if want_w:
            out["weights"] = wgrads
        if "pb" in targets:
            out["pb"] = d_pb
        if "u_seq" in targets:
            out["u_seq"] = d_u / self.normalizer.u_std
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        arrays = dict(self.params)
        arrays["pb"] = self.pb
        arrays["norm.s_mean"] = self.normalizer.s_mean
        arrays["norm.s_std"] = self.normalizer.s_std
        arrays["norm.u_mean"] = self.normalizer.u_mean
        arrays["norm.u_std"] = self.normalizer.u_std
        index = {}
        offset = 0
        for name, a in arrays.items():
            a = np.ascontiguousarray(a, dtype="<f8")
            arrays[name] = a
            index[name] = {"shape": list(a.shape), "offset": offset}
            offset += a.nbytes
        header = {
            "version": CKPT_VERSION,
            "dims": {"n_s": self.dims.n_s, "n_u": self.dims.n_u, "n_p": self.dims.n_p},
            "unit_chain": self.dims.unit_chain(),
            "pb_labels": self.pb_labels,
            "meta": self.meta,
            "payload_bytes": offset,
            "arrays": index,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for a in arrays.values():
                fh.write(a.tobytes())

    @classmethod
    def load(cls, path) -> "DynamicsModel":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < len(CKPT_MAGIC) + 8 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        hlen = int.from_bytes(raw[8:16], "little")
        if len(raw) < 16 + hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        if header.get("version") != CKPT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {header.get('version')!r}")
        payload = raw[16 + hlen:]
        if len(payload) != header["payload_bytes"]:
            raise CheckpointError(f"{path}: truncated payload")
        arrays = {}
        for name, info in header["arrays"].items():
            shape = tuple(info["shape"])
            n = int(np.prod(shape)) if shape else 1
            start = info["offset"]
            arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
            arrays[name] = arr.reshape(shape).copy()
        dims = ModelDims(**header["dims"])
        try:
            fc_in = [nn.DenseParams(arrays[f"fc_in{k}.W"], arrays[f"fc_in{k}.b"])
                     for k in range(4)]
            lstms = [nn.LstmParams.from_packed(arrays[f"lstm{k}.W"],
                                               arrays[f"lstm{k}.U"],
                                               arrays[f"lstm{k}.b"])
                     for k in range(2)]
            fc_out = [nn.DenseParams(arrays[f"fc_out{k}.W"], arrays[f"fc_out{k}.b"])
                      for k in range(4)]
            norm = Normalizer(arrays["norm.s_mean"], arrays["norm.s_std"],
                              arrays["norm.u_mean"], arrays["norm.u_std"])
            model = cls(dims, fc_in, lstms, fc_out, norm,
                        pb_labels=header["pb_labels"], pb=arrays["pb"],
                        meta=header["meta"])
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing array {exc}") from exc
        return model
