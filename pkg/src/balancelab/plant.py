"""Planar single-ankle balance plant with compliant antagonist muscles.

The body is an inverted pendulum on an ankle joint; two antagonist muscles
per ankle (both ankles mirrored, so four muscles total) servo the joint
toward the commanded pitch through a spring-damper with stiction, a stroke
limit and a tension cap.  The foot rests on four sole contact points whose
compliance filters the ground reaction; the zero-moment point is read off
the contact-force distribution like a loadcell array would.

Hidden body-state parameters live in BodyConfig: a trunk-pitch offset that
shifts the center of mass, an ankle-origin offset that miscalibrates the
command, and the sole stiffness/damping ("shoe").  These change the sensed
dynamics without appearing in the model inputs, which is exactly what the
parametric bias has to absorb.

Sign conventions: positive angles lean the body toward +x (the toes);
ZMP is normalized by the foot half length, so the support interval is
[-1, 1] while the foot is flat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

DT = 0.005            # integration substep [s]
TICK_SUBSTEPS = 40    # substeps per 5 Hz control tick
TICK_DT = DT * TICK_SUBSTEPS
GRAVITY = 9.81

FALL_ANGLE = 0.5      # [rad]
FALL_ZMP_TIME = 0.4   # [s] continuous time with the raw ZMP outside support

N_MUSCLES = 4
# front/back pair per ankle, ankles mirrored: +1 shortens when leaning forward
MUSCLE_SIGN = np.array([1.0, -1.0, 1.0, -1.0])

SOLE_PRESETS = {
    # (stiffness N/m per point, damping N s/m per point)
    "hard": (20000.0, 200.0),
    "mid": (10000.0, 250.0),
    "soft": (4000.0, 320.0),
}


class PlantConfigError(ValueError):
    """Body parameters fail validation or give an unstable open-loop plant."""


class PlantFallenError(RuntimeError):
    """Raised by sense() when there is no usable ground contact."""


class IntegrationError(RuntimeError):
    """The state went non-finite during integration."""


@dataclass
class BodyConfig:
    """Plant parameters; the first three fields are the hidden body state."""

    label: str = "default"
    theta_sp_deg: float = 0.0        # trunk pitch offset [deg]
    theta_ao_deg: float = 0.0        # ankle joint-origin offset [deg]
    sole_k: float = 20000.0          # sole stiffness per contact point [N/m]
    sole_c: float = 200.0            # sole damping per contact point [N s/m]
    foot_half_length: float = 0.14   # [m]
    foot_half_width: float = 0.05    # [m]
    body_mass: float = 8.0           # [kg]
    com_height: float = 0.30         # ankle-to-CoM distance [m]
    ankle_height: float = 0.05      # sole-to-ankle height [m]
    inertia_factor: float = 2.0      # I about the ankle / (m r^2), extended body
    muscle_k: float = 40.0           # muscle stiffness [N/mm]
    muscle_c: float = 0.9            # muscle damping [N s/mm]
    muscle_moment_arm: float = 0.03  # [m]
    muscle_rest_mm: float = 120.0    # slack musculotendon length at 0 rad [mm]
    muscle_pretension_mm: float = 4.0
    muscle_max_tension: float = 400.0  # [N]
    muscle_servo_rate: float = 25.0  # winch rate limit [mm/s]
    muscle_servo_tau: float = 0.08   # winch first-order lag [s]
    muscle_friction_mm: float = 0.2  # stiction deadband [mm]
    muscle_stroke_rad: float = 0.12  # winch end stop, command-equivalent [rad]
    joint_damping: float = 1.8       # [N m s/rad]

    def __post_init__(self):
        if not self.label:
            raise PlantConfigError("label must be non-empty")
        positive = (
            "sole_k", "sole_c", "foot_half_length", "foot_half_width", "body_mass",
            "com_height", "ankle_height", "muscle_k", "muscle_c", "muscle_moment_arm",
            "muscle_rest_mm", "muscle_max_tension", "muscle_servo_rate",
            "muscle_servo_tau", "muscle_stroke_rad", "joint_damping",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise PlantConfigError(f"{name} must be > 0")
        for name in ("muscle_pretension_mm", "muscle_friction_mm"):
            if getattr(self, name) < 0:
                raise PlantConfigError(f"{name} must be >= 0")
        if abs(self.theta_sp_deg) > 15.0 or abs(self.theta_ao_deg) > 15.0:
            raise PlantConfigError("posture offsets limited to +-15 deg")

    def with_sole(self, preset: str) -> "BodyConfig":
        k, c = SOLE_PRESETS[preset]
        return replace(self, sole_k=k, sole_c=c)

    # derived quantities --------------------------------------------------

    @property
    def theta_sp(self) -> float:
        return math.radians(self.theta_sp_deg)

    @property
    def theta_ao(self) -> float:
        return math.radians(self.theta_ao_deg)

    @property
    def rho_mm(self) -> float:
        """Muscle excursion per joint radian [mm/rad]."""
        return self.muscle_moment_arm * 1000.0

    @property
    def com_shift(self) -> float:
        """Horizontal CoM shift caused by the trunk pitch offset [m]."""
        return self.com_height * math.sin(self.theta_sp)

    @property
    def com_radius(self) -> float:
        return math.hypot(self.com_height, self.com_shift)

    @property
    def com_angle(self) -> float:
        """Angle of the CoM lever in the body frame."""
        return math.atan2(self.com_shift, self.com_height)

    @property
    def inertia(self) -> float:
        """Rotational inertia about the ankle [kg m^2]."""
        return self.inertia_factor * self.body_mass * self.com_radius ** 2

    @property
    def inertia_com(self) -> float:
        """Rotational inertia about the CoM (parallel-axis remainder)."""
        return (self.inertia_factor - 1.0) * self.body_mass * self.com_radius ** 2

    @property
    def servo_stiffness(self) -> float:
        """Small-angle muscle stiffness toward the commanded pitch [N m/rad]."""
        return N_MUSCLES * self.muscle_k * self.rho_mm * self.muscle_moment_arm

    @property
    def gravity_stiffness(self) -> float:
        return self.body_mass * GRAVITY * self.com_radius


@dataclass
class Disturbance:
    """Horizontal force pulse on the body."""

    force: float          # [N], +x pushes toward the toes
    start: float          # [s]
    duration: float       # [s]
    height: float = 0.30  # application height above ground [m]

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("disturbance duration must be > 0")

    def active(self, t: float) -> bool:
        return self.start <= t < self.start + self.duration


@dataclass
class PlantState:
    """Snapshot of the mechanical state (mostly for logging and tests)."""

    time: float
    angle: float
    angular_velocity: float
    muscle_lengths: np.ndarray   # actuator-side lengths [mm]
    muscle_tensions: np.ndarray  # [N]
    sole_compression: np.ndarray  # per contact point [m]
    zmp_raw: float               # unfiltered dynamic ZMP [m]


@dataclass
class SensorNoise:
    """Zero-mean Gaussian noise added by sense(); scales are one sigma."""

    loadcell: float = 1.0  # per contact point [N]
    tension: float = 0.4   # [N]
    length: float = 0.04   # [mm]


class AnklePlant:
    """One plant instance simulates one episode; single-threaded."""

    def __init__(self, cfg: BodyConfig, seed: int = 0,
                 noise: SensorNoise | None = SensorNoise(), verify: bool = True):
        self.cfg = cfg
        self.noise = noise
        self._rng = np.random.default_rng(seed)
        self._disturbances: list[Disturbance] = []
        self.reset()
        if verify:
            self._verify_stability()

    # -- lifecycle ---------------------------------------------------------

    def reset(self):
        cfg = self.cfg
        self.time = 0.0
        self.theta = 0.0
        self.omega = 0.0
        self.theta_ref = 0.0
        # winch lengths start on the t=0 command, so a constant command
        # injects no servo energy
        self.act_len = self._command_lengths(0.0)
        self._act_rate = np.zeros(N_MUSCLES)
        self.tensions = self._muscle_tensions(np.zeros(N_MUSCLES))[0]
        # sole filter state, initialized at the static load
        f_z = cfg.body_mass * GRAVITY
        self.compression = f_z / (4.0 * cfg.sole_k)
        self.foot_pitch = 0.0
        self._compression_rate = 0.0
        self._foot_pitch_rate = 0.0
        self.zmp_raw = self._com_x()
        self._outside_timer = 0.0
        self._fallen = False
        self._airborne = False

    def schedule(self, dist: Disturbance):
        self._disturbances.append(dist)

    # -- internals -----------------------------------------------------------

    def _command_lengths(self, theta_ref: float) -> np.ndarray:
        cfg = self.cfg
        theta_cmd = theta_ref + cfg.theta_ao
        theta_eff = min(max(theta_cmd, -cfg.muscle_stroke_rad), cfg.muscle_stroke_rad)
        return (cfg.muscle_rest_mm - MUSCLE_SIGN * cfg.rho_mm * theta_eff
                - cfg.muscle_pretension_mm)

    def _muscle_tensions(self, act_rate: np.ndarray):
        """Tensions from the stretch between geometry and winch, clipped to [0, max]."""
        cfg = self.cfg
        geo = cfg.muscle_rest_mm - MUSCLE_SIGN * cfg.rho_mm * self.theta
        geo_rate = -MUSCLE_SIGN * cfg.rho_mm * self.omega
        stretch = geo - self.act_len
        stretch_rate = geo_rate - act_rate
        raw = cfg.muscle_k * stretch + cfg.muscle_c * stretch_rate
        return np.clip(raw, 0.0, cfg.muscle_max_tension), stretch

    def _external_force(self) -> tuple[float, float]:
        """Active horizontal push (force, height above ground)."""
        for d in self._disturbances:
            if d.active(self.time):
                return d.force, d.height
        return 0.0, 0.0

    def _com_x(self) -> float:
        cfg = self.cfg
        return cfg.com_radius * math.sin(self.theta + cfg.com_angle)

    def _substep(self):
        cfg = self.cfg

        # muscle winch: rate-limited first-order lag with a stiction deadband
        l_cmd = self._command_lengths(self.theta_ref)
        err = l_cmd - self.act_len
        move = np.where(np.abs(err) > cfg.muscle_friction_mm,
                        np.clip(err / cfg.muscle_servo_tau,
                                -cfg.muscle_servo_rate, cfg.muscle_servo_rate),
                        0.0)
        self.act_len = self.act_len + DT * move
        self._act_rate = move

        tensions, _ = self._muscle_tensions(move)
        self.tensions = tensions
        tau_m = float(np.sum(MUSCLE_SIGN * tensions)) * cfg.muscle_moment_arm

        f_ext, h_ext = self._external_force()
        tau_ext = f_ext * max(h_ext - cfg.ankle_height, 0.0)

        lever = self.theta + cfg.com_angle
        tau_g = cfg.gravity_stiffness * math.sin(lever)
        alpha = (tau_g + tau_m + tau_ext - cfg.joint_damping * self.omega) / cfg.inertia

        # semi-implicit Euler on the body
        self.omega += DT * alpha
        self.theta += DT * self.omega

        # ground reaction bookkeeping (rigid-body Newton-Euler)
        sin_l = math.sin(self.theta + cfg.com_angle)
        cos_l = math.cos(self.theta + cfg.com_angle)
        x_c = cfg.com_radius * sin_l
        z_c = cfg.ankle_height + cfg.com_radius * cos_l
        xdd = cfg.com_radius * (alpha * cos_l - self.omega ** 2 * sin_l)
        zdd = -cfg.com_radius * (alpha * sin_l + self.omega ** 2 * cos_l)
        g_eff = GRAVITY + zdd
        if g_eff <= 0.1 * GRAVITY:
            self._airborne = True
            self._fallen = True
            g_eff = 0.1 * GRAVITY
        f_z = cfg.body_mass * g_eff
        spin = cfg.inertia_com * alpha / cfg.body_mass
        self.zmp_raw = x_c - (z_c * xdd + spin - h_ext * f_ext / cfg.body_mass) / g_eff

        # sole compliance: contact state relaxes toward the static distribution
        l_f = cfg.foot_half_length
        zmp_c = min(max(self.zmp_raw, -0.999 * l_f), 0.999 * l_f)
        comp_star = f_z / (4.0 * cfg.sole_k)
        pitch_star = f_z * zmp_c / (4.0 * cfg.sole_k * l_f * l_f)
        tau_sole = max(cfg.sole_c / cfg.sole_k, DT)
        self._compression_rate = (comp_star - self.compression) / tau_sole
        self._foot_pitch_rate = (pitch_star - self.foot_pitch) / tau_sole
        self.compression += DT * self._compression_rate
        self.foot_pitch += DT * self._foot_pitch_rate

        self.time += DT

        if abs(self.zmp_raw) > l_f:
            self._outside_timer += DT
        else:
            self._outside_timer = 0.0
        if abs(self.theta) > FALL_ANGLE or self._outside_timer > FALL_ZMP_TIME:
            self._fallen = True

        if not (math.isfinite(self.theta) and math.isfinite(self.omega)):
            raise IntegrationError(f"state went non-finite at t={self.time:.3f}s")

    def step_tick(self, theta_ref: float):
        """Advance one 5 Hz control tick holding theta_ref constant."""
        self.theta_ref = float(theta_ref)
        for _ in range(TICK_SUBSTEPS):
            self._substep()

    # -- observation -----------------------------------------------------------

    def contact_forces(self) -> np.ndarray:
        """Normal force at the four contact points (toe/heel x left/right)."""
        cfg = self.cfg
        xs = np.array([cfg.foot_half_length, cfg.foot_half_length,
                       -cfg.foot_half_length, -cfg.foot_half_length])
        s = self.compression + xs * self.foot_pitch
        s_rate = self._compression_rate + xs * self._foot_pitch_rate
        return np.maximum(0.0, cfg.sole_k * s + cfg.sole_c * s_rate)

    def muscle_lengths_geometric(self) -> np.ndarray:
        """Musculotendon length from the joint geometry [mm].

        This is what a length sensor on a tension-servoed muscle reads: the
        wire pays out as the joint moves, so the measured length follows the
        body, not just the winch command.
        """
        cfg = self.cfg
        return cfg.muscle_rest_mm - MUSCLE_SIGN * cfg.rho_mm * self.theta

    def sense(self) -> np.ndarray:
        """Sensor vector (z_x, z_y, tensions, lengths); raises when airborne.

        Loadcell noise perturbs the contact forces before the weighted mean,
        so the sensed ZMP stays inside the physical support interval.
        """
        cfg = self.cfg
        forces = self.contact_forces()
        if self.noise is not None:
            forces = np.maximum(
                0.0, forces + self._rng.normal(0.0, self.noise.loadcell, N_MUSCLES))
        total = float(forces.sum())
        if self._airborne or total <= 0.0:
            raise PlantFallenError("no ground contact")
        xs = np.array([cfg.foot_half_length, cfg.foot_half_length,
                       -cfg.foot_half_length, -cfg.foot_half_length])
        ys = np.array([cfg.foot_half_width, -cfg.foot_half_width,
                       cfg.foot_half_width, -cfg.foot_half_width])
        # weighted means of points at +-1 are inside [-1, 1] bar round-off
        z_x = min(max(float((xs * forces).sum()) / total / cfg.foot_half_length, -1.0), 1.0)
        z_y = min(max(float((ys * forces).sum()) / total / cfg.foot_half_width, -1.0), 1.0)
        f = self.tensions.copy()
        l = self.muscle_lengths_geometric()
        if self.noise is not None:
            f = np.maximum(0.0, f + self._rng.normal(0.0, self.noise.tension, N_MUSCLES))
            l = l + self._rng.normal(0.0, self.noise.length, N_MUSCLES)
        return np.concatenate([[z_x, z_y], f, l])

    def is_fallen(self) -> bool:
        return self._fallen or abs(self.theta) > FALL_ANGLE \
            or self._outside_timer > FALL_ZMP_TIME

    def snapshot(self) -> PlantState:
        return PlantState(
            time=self.time,
            angle=self.theta,
            angular_velocity=self.omega,
            muscle_lengths=self.act_len.copy(),
            muscle_tensions=self.tensions.copy(),
            sole_compression=self.compression
            + np.array([1.0, 1.0, -1.0, -1.0]) * self.cfg.foot_half_length * self.foot_pitch,
            zmp_raw=self.zmp_raw,
        )

    def mechanical_energy(self) -> float:
        """Kinetic + gravity + muscle-spring energy of the body [J].

        The sole filter is sensing-side and excluded; under a constant
        command this quantity is non-increasing (dissipative plant).
        """
        cfg = self.cfg
        kinetic = 0.5 * cfg.inertia * self.omega ** 2
        potential = cfg.gravity_stiffness * math.cos(self.theta + cfg.com_angle)
        _, stretch = self._muscle_tensions(self._act_rate)
        spring = float(np.sum(0.5 * cfg.muscle_k * np.maximum(stretch, 0.0) ** 2)) / 1000.0
        return kinetic + potential + spring

    # -- construction-time stability gate ----------------------------------------

    def _verify_stability(self):
        cfg = self.cfg
        if cfg.servo_stiffness <= 1.3 * cfg.gravity_stiffness:
            raise PlantConfigError(
                f"{cfg.label}: muscle servo stiffness {cfg.servo_stiffness:.1f} N m/rad "
                f"cannot hold gravity stiffness {cfg.gravity_stiffness:.1f} N m/rad")
        # short settle run: the open-loop plant must come to rest upright
        saved_noise = self.noise
        self.noise = None
        try:
            for _ in range(int(3.0 / TICK_DT)):
                self.step_tick(0.0)
                if self.is_fallen():
                    raise PlantConfigError(f"{cfg.label}: open-loop plant falls at rest")
            if abs(self.omega) > 0.05 or abs(self.theta) > 0.35:
                raise PlantConfigError(
                    f"{cfg.label}: open-loop plant does not settle "
                    f"(theta={self.theta:.3f}, omega={self.omega:.3f})")
        finally:
            self.noise = saved_noise
            self.reset()
