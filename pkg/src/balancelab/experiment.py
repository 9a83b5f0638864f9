"""Experiment stages shared by the CLI: collect, train, adapt, control, eval.

A flat key = value config file (INI sections) describes the body-state
grid, the collection policy, training and control settings, and the
push-recovery protocol.  Every stage writes its artifacts plus a
machine-readable summary under one output directory:

    dataset/   episode CSVs + manifest
    model/     checkpoint + training log
    adapt/     bias-trajectory CSVs
    control/   per-condition trial and controller logs
    eval/      metrics.json, plot-ready CSVs, rendered figures
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, OnlineAdapter, save_history
from .analysis import (
    TRIAL_TICKS, TrialRecord, mean_trajectory, metric_ef, metric_ez,
    pca_project, rms_step_change, second_overshoot_ratio,
)
from .collect import (
    CollectionError, load_dataset, run_collection, save_episode, save_manifest,
)
from .mpc import BalanceMpc, ControlConfig, save_controller_log
from .model import DynamicsModel
from .plant import AnklePlant, BodyConfig, Disturbance, SensorNoise, TICK_DT
from .train import TrainConfig, build_windows, evaluate_model, split_windows, train_model

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage cannot run; the message names what is missing."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StateSpec:
    label: str
    theta_sp_deg: float
    theta_ao_deg: float
    sole: str = "hard"

    def body(self, base: BodyConfig | None = None) -> BodyConfig:
        base = base or BodyConfig(label=self.label)
        return replace(base.with_sole(self.sole), label=self.label,
                       theta_sp_deg=self.theta_sp_deg, theta_ao_deg=self.theta_ao_deg)


@dataclass
class ControlSpec:
    control: ControlConfig = field(default_factory=ControlConfig)
    conditions: tuple = ("proposed", "none", "pd1", "pd2")
    trials: int = 5
    pb_label: str = ""
    pb_values: tuple | None = None   # explicit bias override
    settle_ticks: int = 10
    pd_gains: dict = field(default_factory=lambda: {"pd1": (0.1, 0.1),
                                                    "pd2": (0.03, 0.1)})


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    states: list[StateSpec] = field(default_factory=list)
    adapt_states: list[StateSpec] = field(default_factory=list)
    policy: str = "proposed"
    steps: int = 300
    noise: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    adapt_updates: int = 45
    adapt_start: str = "zero"       # "zero" or a trained label
    control: ControlSpec = field(default_factory=ControlSpec)
    disturbance: Disturbance = field(default_factory=lambda: Disturbance(
        force=30.0, start=2.0, duration=0.2, height=0.30))
    config_hash: str = ""

    def __post_init__(self):
        labels = [s.label for s in self.states]
        if len(set(labels)) != len(labels):
            raise ValueError("state labels must be unique")


def _parse_state_line(label: str, text: str) -> StateSpec:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) < 2:
        raise ValueError(f"state {label!r}: expected 'theta_sp_deg, theta_ao_deg[, sole]'")
    sole = parts[2] if len(parts) > 2 else "hard"
    return StateSpec(label=label, theta_sp_deg=float(parts[0]),
                     theta_ao_deg=float(parts[1]), sole=sole)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise StageError(f"config file {path} does not exist")
    raw = path.read_text()
    parser = configparser.ConfigParser()
    parser.read_string(raw)

    cfg = ExperimentConfig()
    cfg.config_hash = hashlib.sha256(raw.encode()).hexdigest()[:12]
    if parser.has_section("experiment"):
        sec = parser["experiment"]
        cfg.name = sec.get("name", cfg.name)
        cfg.seed = sec.getint("seed", cfg.seed)
        cfg.noise = sec.getboolean("noise", cfg.noise)
    if parser.has_section("states"):
        cfg.states = [_parse_state_line(k, v) for k, v in parser["states"].items()]
    if parser.has_section("adapt_states"):
        cfg.adapt_states = [_parse_state_line(k, v)
                            for k, v in parser["adapt_states"].items()]
    if parser.has_section("collect"):
        sec = parser["collect"]
        cfg.policy = sec.get("policy", cfg.policy)
        cfg.steps = sec.getint("steps", cfg.steps)
    if parser.has_section("train"):
        sec = parser["train"]
        cfg.train = TrainConfig(
            window=sec.getint("window", 10),
            batch_size=sec.getint("batch_size", 64),
            epochs=sec.getint("epochs", 300),
            lr=sec.getfloat("lr", 1e-3),
            val_fraction=sec.getfloat("val_fraction", 0.1),
            seed=cfg.seed,
        )
    if parser.has_section("adapt"):
        sec = parser["adapt"]
        cfg.adapt = AdaptConfig(lr=sec.getfloat("lr", 0.01),
                                momentum=sec.getfloat("momentum", 0.9))
        cfg.adapt_updates = sec.getint("updates", cfg.adapt_updates)
        cfg.adapt_start = sec.get("start", cfg.adapt_start)
    if parser.has_section("control"):
        sec = parser["control"]
        z_ref = tuple(float(x) for x in sec.get("z_ref", "0, 0").split(","))
        cc = ControlConfig(
            n_step=sec.getint("n_step", 6),
            n_batch=sec.getint("n_batch", 10),
            n_epoch=sec.getint("n_epoch", 3),
            gamma_max=sec.getfloat("gamma_max", 0.1),
            c_f=sec.getfloat("c_f", 0.0),
            c_l=sec.getfloat("c_l", 30.0),
            c_u=sec.getfloat("c_u", 3.0),
            z_ref=z_ref,
        )
        conditions = tuple(c.strip() for c in
                           sec.get("conditions", "proposed, none, pd1, pd2").split(","))
        pb_values = None
        if sec.get("pb_values", "").strip():
            pb_values = tuple(float(x) for x in sec["pb_values"].split(","))
        cfg.control = ControlSpec(
            control=cc, conditions=conditions,
            trials=sec.getint("trials", 5),
            pb_label=sec.get("pb_label", ""),
            pb_values=pb_values,
            settle_ticks=sec.getint("settle_ticks", 10),
        )
    if parser.has_section("pd"):
        for name, text in parser["pd"].items():
            kp, kd = (float(x) for x in text.split(","))
            cfg.control.pd_gains[name] = (kp, kd)
    if parser.has_section("disturbance"):
        sec = parser["disturbance"]
        start_tick = sec.getint("start_tick", 10)
        cfg.disturbance = Disturbance(
            force=sec.getfloat("force", 30.0),
            start=start_tick * TICK_DT,
            duration=sec.getfloat("duration", 0.2),
            height=sec.getfloat("height", 0.30),
        )
        cfg.control.settle_ticks = start_tick
    return cfg


# ---------------------------------------------------------------------------
# baseline controllers


class NullController:
    """No control: the command stays at zero."""

    def reset(self):
        pass

    def step(self, s) -> float:
        return 0.0


class PdController:
    """PD on the ZMP x error at 5 Hz.

    Sign convention: positive z_x error commands a forward lean
    (u = +Kp e + Kd de/dt), clipped to the joint limits.
    """

    def __init__(self, kp: float, kd: float, z_ref_x: float = 0.0):
        self.kp = kp
        self.kd = kd
        self.z_ref_x = z_ref_x
        self.reset()

    def reset(self):
        self._e_prev = None

    def step(self, s) -> float:
        e = float(s[0]) - self.z_ref_x
        de = 0.0 if self._e_prev is None else (e - self._e_prev) / TICK_DT
        self._e_prev = e
        return float(np.clip(self.kp * e + self.kd * de, -1.0, 1.0))


def make_controller(condition: str, model: DynamicsModel | None, pb,
                    spec: ControlSpec):
    if condition == "none":
        return NullController()
    if condition in spec.pd_gains:
        kp, kd = spec.pd_gains[condition]
        return PdController(kp, kd, z_ref_x=spec.control.z_ref[0])
    if condition == "proposed":
        if model is None:
            raise StageError("the 'proposed' condition needs a trained model")
        return BalanceMpc(model, pb, spec.control)
    raise StageError(f"unknown control condition {condition!r}")


# ---------------------------------------------------------------------------
# push-recovery protocol


def run_push_trial(body: BodyConfig, controller, dist: Disturbance, seed: int,
                   noise: bool = True):
    """One settle + push + 6 s recording pass.

    The recorded window starts with the settled sample taken right at push
    onset, so removing the trial's initial z_x aligns every trial on its
    pre-push baseline and the spike plus recovery fall inside the window.
    """
    plant = AnklePlant(body, seed=seed,
                       noise=SensorNoise() if noise else None, verify=False)
    plant.schedule(dist)
    controller.reset()
    push_tick = int(round(dist.start / TICK_DT))
    n_ticks = push_tick + TRIAL_TICKS
    states, controls = [], []
    fell = False
    for _ in range(n_ticks):
        s = plant.sense()
        u = controller.step(s)
        states.append(s)
        controls.append(u)
        plant.step_tick(u)
        fell = fell or plant.is_fallen()
    record = TrialRecord(
        condition=getattr(controller, "condition", "trial"),
        t=np.arange(TRIAL_TICKS) * TICK_DT,
        states=np.asarray(states[push_tick:]),
        controls=np.asarray(controls[push_tick:]),
    )
    return record, fell


def save_trial(record: TrialRecord, path, seed: int, fell: bool):
    n_s = record.states.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(f"# condition={record.condition} seed={seed} fell={int(fell)}\n")
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"s{k}" for k in range(n_s)] + ["u"])
        for i in range(TRIAL_TICKS):
            writer.writerow([repr(float(record.t[i]))]
                            + [repr(float(v)) for v in record.states[i]]
                            + [repr(float(record.controls[i]))])


def load_trial(path) -> tuple[TrialRecord, bool]:
    with open(path, newline="") as fh:
        meta = dict(item.split("=", 1) for item in fh.readline()[1:].split())
        rows = list(csv.reader(fh))
    arr = np.array(rows[1:], dtype=float)
    record = TrialRecord(condition=meta["condition"], t=arr[:, 0],
                         states=arr[:, 1:-1], controls=arr[:, -1])
    return record, bool(int(meta.get("fell", "0")))


# ---------------------------------------------------------------------------
# stages


def stage_collect(cfg: ExperimentConfig, out: Path) -> Path:
    if not cfg.states:
        raise StageError("config defines no body states to collect")
    dataset = out / "dataset"
    dataset.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, spec in enumerate(cfg.states):
        body = spec.body()
        seed = cfg.seed + k
        noise = SensorNoise() if cfg.noise else None
        plant = AnklePlant(body, seed=seed, noise=noise)
        fname = f"episode_{spec.label}.csv"
        try:
            ep = run_collection(plant, cfg.policy, cfg.steps, seed=seed,
                                label=spec.label)
        except CollectionError as exc:
            log.warning("collection failed for %s: %s", spec.label, exc)
            entries.append({"label": spec.label, "file": "", "policy": cfg.policy,
                            "seed": seed, "length": 0, "fell": 1, "error": str(exc)})
            continue
        save_episode(ep, dataset / fname, config_hash=cfg.config_hash)
        entries.append({"label": spec.label, "file": fname, "policy": cfg.policy,
                        "seed": seed, "length": len(ep), "fell": int(ep.fell),
                        "error": ""})
    save_manifest(entries, dataset)
    summary = {
        "config_hash": cfg.config_hash, "seed": cfg.seed,
        "episodes": [{k: e[k] for k in ("label", "length", "fell")} for e in entries],
        "total_rows": int(sum(e["length"] for e in entries)),
    }
    _write_summary(dataset / "summary.json", summary)
    return dataset


def stage_train(cfg: ExperimentConfig, out: Path) -> Path:
    dataset = out / "dataset"
    if not (dataset / "manifest.csv").exists():
        raise StageError("missing dataset: run the collect stage first")
    episodes = load_dataset(dataset)
    model, history = train_model(episodes, cfg.train)
    model.meta["config_hash"] = cfg.config_hash
    model_dir = out / "model"
    model_dir.mkdir(parents=True, exist_ok=True)
    ckpt = model_dir / "model.ckpt"
    model.save(ckpt)
    with open(model_dir / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["lr"]),
                             repr(row["train_loss"]), repr(row["val_loss"])])
    ws = build_windows(episodes, cfg.train.window)
    _, val_ws = split_windows(ws, cfg.train.val_fraction)
    report = evaluate_model(model, val_ws if len(val_ws) else ws)
    summary = {
        "config_hash": cfg.config_hash, "seed": cfg.seed,
        "labels": model.pb_labels,
        "pb": [[float(v) for v in row] for row in model.pb],
        "final_train_loss": history[-1]["train_loss"] if history else None,
        "final_val_loss": history[-1]["val_loss"] if history else None,
        "one_step_rmse": [float(v) for v in report["one_step_rmse"]],
        "rollout_rmse": [float(v) for v in report["rollout_rmse"]],
    }
    _write_summary(model_dir / "summary.json", summary)
    return ckpt


def run_adaptation_stream(model: DynamicsModel, body: BodyConfig, cfg: ExperimentConfig,
                          p0, n_updates: int, seed: int) -> OnlineAdapter:
    """Drive the plant like data collection while adapting the bias online."""
    adapter = OnlineAdapter(model, p0=p0, cfg=cfg.adapt)
    plant = AnklePlant(body, seed=seed,
                       noise=SensorNoise() if cfg.noise else None, verify=False)
    from .collect import CommandPolicy
    policy = CommandPolicy(cfg.policy, seed=seed)
    t0 = time.perf_counter()
    while adapter.updates < n_updates:
        if plant.is_fallen():
            log.warning("plant fell during adaptation for %s after %d updates",
                        body.label, adapter.updates)
            break
        s = plant.sense()
        u = policy.step()
        adapter.observe(s, np.array([u]))
        plant.step_tick(u)
    log.info("adaptation for %s: %d updates in %.2f s wall time",
             body.label, adapter.updates, time.perf_counter() - t0)
    return adapter


def stage_adapt(cfg: ExperimentConfig, out: Path) -> Path:
    ckpt = out / "model" / "model.ckpt"
    if not ckpt.exists():
        raise StageError("missing model checkpoint: run the train stage first")
    model = DynamicsModel.load(ckpt)
    if not cfg.adapt_states:
        raise StageError("config defines no adapt_states")
    adapt_dir = out / "adapt"
    adapt_dir.mkdir(parents=True, exist_ok=True)
    summary = {"config_hash": cfg.config_hash, "seed": cfg.seed, "runs": []}
    for k, spec in enumerate(cfg.adapt_states):
        p0 = (np.zeros(model.dims.n_p) if cfg.adapt_start == "zero"
              else model.pb_for(cfg.adapt_start))
        adapter = run_adaptation_stream(model, spec.body(), cfg, p0,
                                        cfg.adapt_updates, seed=cfg.seed + 100 + k)
        save_history(adapter.history, adapt_dir / f"pb_{spec.label}.csv",
                     n_p=model.dims.n_p)
        dists = np.linalg.norm(model.pb - adapter.p, axis=1)
        nearest = model.pb_labels[int(np.argmin(dists))]
        summary["runs"].append({
            "label": spec.label, "updates": adapter.updates,
            "p_final": [float(v) for v in adapter.p],
            "nearest_trained": nearest,
        })
    _write_summary(adapt_dir / "summary.json", summary)
    return adapt_dir


def stage_control(cfg: ExperimentConfig, out: Path) -> Path:
    ckpt = out / "model" / "model.ckpt"
    if not ckpt.exists():
        raise StageError("missing model checkpoint: run the train stage first")
    model = DynamicsModel.load(ckpt)
    spec = cfg.control
    if spec.pb_values is not None:
        pb = np.asarray(spec.pb_values, dtype=float)
    elif spec.pb_label:
        pb = model.pb_for(spec.pb_label)
    else:
        pb = model.pb[0].copy()
    target_label = spec.pb_label or model.pb_labels[0]
    try:
        body_spec = next(s for s in cfg.states if s.label == target_label)
    except StopIteration:
        raise StageError(f"no body state named {target_label!r} to control")
    body = body_spec.body()

    ctl_dir = out / "control"
    ctl_dir.mkdir(parents=True, exist_ok=True)
    summary = {"config_hash": cfg.config_hash, "seed": cfg.seed,
               "disturbance": {"force": cfg.disturbance.force,
                               "duration": cfg.disturbance.duration,
                               "height": cfg.disturbance.height},
               "conditions": {}}
    for condition in spec.conditions:
        trials = []
        for trial in range(spec.trials):
            controller = make_controller(condition, model, pb, spec)
            controller.condition = condition
            record, fell = run_push_trial(body, controller, cfg.disturbance,
                                          seed=cfg.seed + 1000 * (trial + 1),
                                          noise=cfg.noise)
            save_trial(record, ctl_dir / f"{condition}_trial{trial}.csv",
                       seed=cfg.seed + 1000 * (trial + 1), fell=fell)
            if isinstance(controller, BalanceMpc):
                save_controller_log(controller.log,
                                    ctl_dir / f"{condition}_ctl{trial}.csv",
                                    n_epoch=spec.control.n_epoch)
            trials.append((record, fell))
        summary["conditions"][condition] = {
            "e_z": metric_ez([r for r, _ in trials]),
            "e_f": float(np.mean([metric_ef(r) for r, _ in trials])),
            "rms_du": float(np.mean([rms_step_change(r.controls) for r, _ in trials])),
            "fell": int(sum(f for _, f in trials)),
        }
    _write_summary(ctl_dir / "summary.json", summary)
    return ctl_dir


def stage_eval(cfg: ExperimentConfig, out: Path) -> Path:
    ctl_dir = out / "control"
    if not (ctl_dir / "summary.json").exists():
        raise StageError("missing control logs: run the control stage first")
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    conditions: dict[str, list[TrialRecord]] = {}
    for path in sorted(ctl_dir.glob("*_trial*.csv")):
        record, _ = load_trial(path)
        conditions.setdefault(record.condition, []).append(record)

    metrics = {"config_hash": cfg.config_hash, "seed": cfg.seed, "conditions": {}}
    for name, trials in conditions.items():
        mt = mean_trajectory(trials)
        metrics["conditions"][name] = {
            "e_z": metric_ez(trials),
            "e_f": float(np.mean([metric_ef(t) for t in trials])),
            "rms_du": float(np.mean([rms_step_change(t.controls) for t in trials])),
            "second_overshoot": second_overshoot_ratio(mt),
        }
    if "proposed" in metrics["conditions"] and "none" in metrics["conditions"]:
        metrics["proposed_beats_none"] = bool(
            metrics["conditions"]["proposed"]["e_z"]
            < metrics["conditions"]["none"]["e_z"])

    # plot-ready CSVs
    with open(eval_dir / "zx_mean.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        names = sorted(conditions)
        writer.writerow(["t"] + names)
        traces = {n: mean_trajectory(conditions[n]) for n in names}
        for i in range(TRIAL_TICKS):
            writer.writerow([repr(i * TICK_DT)]
                            + [repr(float(traces[n][i])) for n in names])
    with open(eval_dir / "bars.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "e_z", "e_f", "rms_du"])
        for name in sorted(metrics["conditions"]):
            m = metrics["conditions"][name]
            writer.writerow([name, repr(m["e_z"]), repr(m["e_f"]), repr(m["rms_du"])])

    ckpt = out / "model" / "model.ckpt"
    pb_points = None
    if ckpt.exists():
        model = DynamicsModel.load(ckpt)
        if len(model.pb_labels) >= 2:
            coords, _ = pca_project(model.pb)
            pb_points = (model.pb_labels, coords)
            with open(eval_dir / "pb_scatter.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["label", "pc1", "pc2"])
                for lab, (x, y) in zip(model.pb_labels, coords):
                    writer.writerow([lab, repr(float(x)), repr(float(y))])

    _write_summary(eval_dir / "metrics.json", metrics)

    from . import figures
    fig_dir = eval_dir / "figures"
    figures.render_all(fig_dir, conditions=conditions, metrics=metrics,
                       pb_points=pb_points)
    return eval_dir


def _write_summary(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
