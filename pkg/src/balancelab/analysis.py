"""Metrics and data reductions for the experiment reports.

E_z summarizes a push-recovery trial: remove the trial's initial ZMP offset
(so plots share an origin), then average the summed |z_x| across trials.
E_f is the RMS of the tick-to-tick muscle-tension change norm.  The bias
vectors of a trained model are projected to a plane with a small in-house
PCA (closed form for 2x2, cyclic Jacobi above that).  Everything here is
pure; rendering lives in figures.py.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRIAL_TICKS = 30  # 6 s at 5 Hz


@dataclass
class TrialRecord:
    """Post-disturbance window of one trial."""

    condition: str
    t: np.ndarray        # (TRIAL_TICKS,)
    states: np.ndarray   # (TRIAL_TICKS, n_s)
    controls: np.ndarray  # (TRIAL_TICKS,)

    def __post_init__(self):
        if not self.condition:
            raise ValueError("condition label must be non-empty")
        if len(self.states) != TRIAL_TICKS:
            raise ValueError(
                f"trial must hold {TRIAL_TICKS} ticks, got {len(self.states)}")

    @property
    def z_x(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def tensions(self) -> np.ndarray:
        n_m = (self.states.shape[1] - 2) // 2
        return self.states[:, 2:2 + n_m]


def metric_ez(trials: list[TrialRecord]) -> float:
    """Average over trials of the offset-removed sum of |z_x|."""
    if not trials:
        raise ValueError("no trials")
    total = 0.0
    for tr in trials:
        z = tr.z_x - tr.z_x[0]
        total += float(np.abs(z).sum())
    return total / len(trials)


def rms_step_change(series: np.ndarray) -> float:
    """RMS over ticks of the Euclidean norm of consecutive-step changes."""
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    if len(series) < 2:
        raise ValueError("need at least two ticks")
    step_norms = np.linalg.norm(np.diff(series, axis=0), axis=1)
    return float(np.sqrt(np.mean(step_norms ** 2)))


def metric_ef(trial: TrialRecord) -> float:
    """RMS of ||f_t - f_{t-1}||_2 over the trial."""
    return rms_step_change(trial.tensions)


def mean_trajectory(trials: list[TrialRecord]) -> np.ndarray:
    """Offset-removed z_x averaged across trials."""
    return np.mean([tr.z_x - tr.z_x[0] for tr in trials], axis=0)


def second_overshoot_ratio(z: np.ndarray) -> float:
    """|largest counter-swing| / |first peak| of an offset-removed trace."""
    z = np.asarray(z, dtype=float)
    k = int(np.argmax(np.abs(z)))
    first = z[k]
    if first == 0.0:
        return 0.0
    rest = z[k + 1:]
    if len(rest) == 0:
        return 0.0
    counter = np.where(np.sign(rest) == -np.sign(first), np.abs(rest), 0.0)
    return float(counter.max() / abs(first))


# ---------------------------------------------------------------------------
# PCA on bias vectors


def _eigh_2x2(a):
    """Closed-form eigen-decomposition of a symmetric 2x2, ascending."""
    p, q, r = a[0, 0], a[0, 1], a[1, 1]
    half_tr = 0.5 * (p + r)
    disc = np.sqrt(max(0.25 * (p - r) ** 2 + q * q, 0.0))
    w = np.array([half_tr - disc, half_tr + disc])
    if q == 0.0 and p == r:
        v = np.eye(2)
    else:
        # eigenvector for the larger eigenvalue
        if abs(q) > 1e-300:
            v1 = np.array([q, w[1] - p])
        else:
            v1 = np.array([1.0, 0.0]) if p >= r else np.array([0.0, 1.0])
        v1 = v1 / np.linalg.norm(v1)
        v0 = np.array([-v1[1], v1[0]])
        v = np.column_stack([v0, v1])
    return w, v


def _eigh_jacobi(a, sweeps: int = 50, tol: float = 1e-12):
    """Cyclic Jacobi sweeps for a small symmetric matrix, ascending."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < tol:
                    continue
                theta = 0.5 * np.arctan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def eigh_symmetric(a):
    a = np.asarray(a, dtype=float)
    if a.shape == (2, 2):
        return _eigh_2x2(a)
    return _eigh_jacobi(a)


def pca_project(points, labels=None):
    """Mean-center and project onto the top-2 principal directions.

    Sign convention: each component's largest-magnitude loading is positive.
    A rank-0 set maps to the origin.  Returns (coords (K, 2), components).
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or len(points) < 2:
        raise ValueError("need at least two points")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    if np.allclose(cov, 0.0):
        return np.zeros((len(points), 2)), np.zeros((points.shape[1], 2))
    w, v = eigh_symmetric(cov)
    comps = v[:, np.argsort(w)[::-1][:2]]
    if comps.shape[1] < 2:
        comps = np.column_stack([comps, np.zeros(points.shape[1])])
    for k in range(comps.shape[1]):
        lead = np.argmax(np.abs(comps[:, k]))
        if comps[lead, k] < 0:
            comps[:, k] = -comps[:, k]
    return centered @ comps, comps
