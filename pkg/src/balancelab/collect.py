"""Exploration policies for balance data collection, plus episode recording.

Three ways to wiggle the ankle command at 5 Hz:

* proposed -- random steps whose max displacement d grows slowly while a
  |sin| envelope alternates violent and quiet windows,
* gradual  -- the growing displacement without the envelope,
* random   -- full-range uniform steps every tick.

The command is always clipped to [-1, 1] rad.  An episode records the
sensed state and the command applied at each tick, truncating early if the
plant falls.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .plant import AnklePlant, PlantFallenError

POLICY_KINDS = ("proposed", "gradual", "random")

N_CNT = 50
C_DIFF = 0.002        # [rad] displacement growth per step
C_INIT_DIFF = 0.1     # [rad] initial max displacement
THETA_MIN = -1.0
THETA_MAX = 1.0

MIN_EPISODE_TICKS = 10


class CollectionError(RuntimeError):
    """The plant fell almost immediately; the policy constants are too hot."""


@dataclass
class CommandPolicy:
    """Sequential command generator; step() emits the next clipped command."""

    kind: str
    seed: int = 0
    c: int = 0
    d: float = C_INIT_DIFF
    theta_ref: float = 0.0
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        self.rng = np.random.default_rng(self.seed)

    def draw_increment(self) -> float:
        """Advance the counters and return this step's pre-clip increment.

        The envelope uses the already-incremented count, so it is zero
        whenever c lands on a multiple of N_CNT.
        """
        self.c += 1
        if self.kind != "random":
            self.d += C_DIFF
        if self.kind == "proposed":
            phase = self.c % N_CNT  # exact zero at multiples of N_CNT
            envelope = 0.0 if phase == 0 else abs(math.sin(math.pi * phase / N_CNT))
            return envelope * self.rng.uniform(-self.d, self.d)
        if self.kind == "gradual":
            return self.rng.uniform(-self.d, self.d)
        return self.rng.uniform(-1.0, 1.0)

    def step(self) -> float:
        self.theta_ref = min(max(self.theta_ref + self.draw_increment(), THETA_MIN),
                             THETA_MAX)
        return self.theta_ref


@dataclass
class Episode:
    """Time series of (sensed state, applied command) for one body state."""

    label: str
    policy: str
    seed: int
    states: np.ndarray    # (T, n_s)
    controls: np.ndarray  # (T, 1)
    angles: np.ndarray    # (T,) plant pitch, for plots/debugging
    fell: bool = False

    def __len__(self) -> int:
        return len(self.states)

    @property
    def n_muscles(self) -> int:
        return (self.states.shape[1] - 2) // 2


def run_collection(plant: AnklePlant, policy_kind: str, steps: int, seed: int = 0,
                   label: str | None = None) -> Episode:
    """Drive the plant with a policy and record (s_t, u_t) pairs at 5 Hz.

    Stops early with a truncated episode once the plant falls.  An almost
    immediate fall raises CollectionError instead.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    policy = CommandPolicy(policy_kind, seed=seed)
    label = label if label is not None else plant.cfg.label
    states, controls, angles = [], [], []
    fell = False
    for _ in range(steps):
        if plant.is_fallen():
            fell = True
            break
        try:
            s = plant.sense()
        except PlantFallenError:
            fell = True
            break
        u = policy.step()
        states.append(s)
        controls.append([u])
        angles.append(plant.theta)
        plant.step_tick(u)
    if len(states) < MIN_EPISODE_TICKS:
        raise CollectionError(
            f"{label}: fell after {len(states)} ticks; "
            "try gentler policy constants or a stabler body configuration")
    return Episode(label=label, policy=policy_kind, seed=seed,
                   states=np.asarray(states), controls=np.asarray(controls),
                   angles=np.asarray(angles), fell=fell)


# ---------------------------------------------------------------------------
# episode CSV + dataset manifest


def episode_csv_header(n_muscles: int) -> list[str]:
    return (["t", "angle", "z_x", "z_y"]
            + [f"f{k}" for k in range(n_muscles)]
            + [f"l{k}" for k in range(n_muscles)]
            + ["theta_ref"])


def save_episode(ep: Episode, path, config_hash: str = "") -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# label={ep.label} policy={ep.policy} seed={ep.seed}"
                 f" fell={int(ep.fell)} config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(episode_csv_header(ep.n_muscles))
        for t in range(len(ep)):
            row = [repr(0.2 * t), repr(float(ep.angles[t]))]
            row += [repr(float(v)) for v in ep.states[t]]
            row += [repr(float(ep.controls[t, 0]))]
            writer.writerow(row)


def load_episode(path) -> Episode:
    path = Path(path)
    with open(path, newline="") as fh:
        meta_line = fh.readline()
        if not meta_line.startswith("#"):
            raise ValueError(f"{path}: missing episode metadata line")
        meta = dict(item.split("=", 1) for item in meta_line[1:].split())
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    n_m = sum(1 for h in header if h.startswith("f"))
    arr = np.array(data, dtype=float)
    states = arr[:, 2:2 + 2 * n_m + 2]
    controls = arr[:, -1:]
    return Episode(label=meta["label"], policy=meta["policy"], seed=int(meta["seed"]),
                   states=states, controls=controls, angles=arr[:, 1],
                   fell=bool(int(meta.get("fell", "0"))))


MANIFEST_NAME = "manifest.csv"


def save_manifest(entries: list[dict], directory) -> Path:
    """Write the dataset manifest; entries come from cmd_collect."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    fields = ["label", "file", "policy", "seed", "length", "fell", "error"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for e in entries:
            writer.writerow({k: e.get(k, "") for k in fields})
    return path


def load_dataset(directory) -> list[Episode]:
    """Load every successfully recorded episode listed in a manifest."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    episodes = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("file"):
                episodes.append(load_episode(directory / row["file"]))
    if not episodes:
        raise ValueError(f"{path}: manifest lists no usable episodes")
    return episodes


# ---------------------------------------------------------------------------
# distribution check used by the policy tests and the acceptance suite


def ks_statistic_uniform(samples, low: float, high: float) -> float:
    """Kolmogorov-Smirnov distance between samples and Uniform(low, high)."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n == 0:
        raise ValueError("no samples")
    cdf = np.clip((x - low) / (high - low), 0.0, 1.0)
    upper = np.abs(np.arange(1, n + 1) / n - cdf).max()
    lower = np.abs(cdf - np.arange(0, n) / n).max()
    return float(max(upper, lower))


def ks_critical_value(n: int, alpha: float = 0.01) -> float:
    """Large-sample critical KS distance; 1.62762 covers alpha = 0.01."""
    coeff = {0.10: 1.22385, 0.05: 1.35810, 0.01: 1.62762}[alpha]
    return coeff / math.sqrt(n)
