"""Ground-truth vehicle simulator.

A planar bicycle model with linear-in-slip tire forces saturated at the
friction limit, plus a first-order roll proxy driven by lateral acceleration.
The position/heading update is pure kinematics; the four dynamic states
(roll, body-frame longitudinal and lateral velocity, heading rate) follow the
tire model, integrated with explicit Euler.  The module also provides regime
mutations (mud, worn tires), a pure-pursuit scripted driver, and closed-loop
dataset generation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

GRAVITY = 9.81

# Tire model constants: cornering stiffness per axle is TIRE_STIFFNESS_FACTOR
# times the axle friction limit, and each axle saturates at half the total
# friction budget mu*m*g.
TIRE_STIFFNESS_FACTOR = 5.0
ROLL_TIME_CONSTANT = 0.2
MIN_SLIP_SPEED = 0.3


class SimulationError(ValueError):
    """Invalid state, control, or parameters fed to the simulator."""


class DriverLostError(RuntimeError):
    """Scripted driver lost the track (vehicle outside the capture radius)."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class KinematicState:
    x_pos: float = 0.0
    y_pos: float = 0.0
    heading: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x_pos, self.y_pos, self.heading])


@dataclass(frozen=True)
class DynamicState:
    roll: float = 0.0
    v_long: float = 0.0
    v_lat: float = 0.0
    heading_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.v_long, self.v_lat, self.heading_rate])

    @staticmethod
    def from_array(z: np.ndarray) -> "DynamicState":
        return DynamicState(float(z[0]), float(z[1]), float(z[2]), float(z[3]))


@dataclass(frozen=True)
class Control:
    steering: float = 0.0
    throttle: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steering", float(np.clip(self.steering, -1.0, 1.0)))
        object.__setattr__(self, "throttle", float(np.clip(self.throttle, -1.0, 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steering, self.throttle])


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the simulated 1/5-scale vehicle."""

    mass: float = 21.0
    wheelbase: float = 0.57
    friction_coeff: float = 1.0
    max_steer_angle: float = 0.35
    motor_gain: float = 6.0
    drag_coeff: float = 0.35
    roll_stiffness: float = 0.5
    com_height: float = 0.15

    def __post_init__(self):
        if not (self.mass > 0 and self.wheelbase > 0 and self.com_height > 0):
            raise SimulationError("mass, wheelbase, com_height must be positive")
        if not (0.0 < self.friction_coeff <= 2.0):
            raise SimulationError("friction_coeff must be in (0, 2]")


@dataclass(frozen=True)
class TrainingPair:
    """One sample: x = dynamic state ++ control, y = finite-difference derivative."""

    x: np.ndarray  # (6,)
    y: np.ndarray  # (4,)
    timestamp: float
    synthetic: bool = False


def pairs_to_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Stack a sequence of TrainingPair into (X, Y) arrays."""
    xs = np.array([p.x for p in pairs])
    ys = np.array([p.y for p in pairs])
    return xs, ys


def dynamic_derivative(dyn: DynamicState, u: Control, p: VehicleParams) -> np.ndarray:
    """Continuous-time derivative of the dynamic state under the tire model.

    Front/rear lateral forces are linear in slip angle with cornering
    stiffness proportional to friction, clipped at half the friction budget
    per axle.  Roll relaxes toward a static roll angle proportional to
    lateral acceleration.
    """
    a = b = 0.5 * p.wheelbase
    delta = u.steering * p.max_steer_angle
    u_eff = max(abs(dyn.v_long), MIN_SLIP_SPEED)

    alpha_f = math.atan2(dyn.v_lat + a * dyn.heading_rate, u_eff) - delta
    alpha_r = math.atan2(dyn.v_lat - b * dyn.heading_rate, u_eff)

    f_max = 0.5 * p.friction_coeff * p.mass * GRAVITY
    stiffness = TIRE_STIFFNESS_FACTOR * p.friction_coeff * p.mass * GRAVITY
    f_yf = float(np.clip(-stiffness * alpha_f, -f_max, f_max))
    f_yr = float(np.clip(-stiffness * alpha_r, -f_max, f_max))

    accel_lat = (f_yf * math.cos(delta) + f_yr) / p.mass

    d_v_long = (
        p.motor_gain * u.throttle
        - p.drag_coeff * dyn.v_long
        + dyn.v_lat * dyn.heading_rate
        - f_yf * math.sin(delta) / p.mass
    )
    d_v_lat = accel_lat - dyn.v_long * dyn.heading_rate
    inertia_z = p.mass * p.wheelbase**2 / 6.0
    d_rate = (a * f_yf * math.cos(delta) - b * f_yr) / inertia_z

    roll_static = p.roll_stiffness * math.atan2(
        accel_lat * p.com_height, GRAVITY * 0.5 * p.wheelbase
    )
    d_roll = (roll_static - dyn.roll) / ROLL_TIME_CONSTANT

    return np.array([d_roll, d_v_long, d_v_lat, d_rate])


def step(
    kin: KinematicState,
    dyn: DynamicState,
    u: Control,
    p: VehicleParams,
    dt: float,
) -> tuple[KinematicState, DynamicState]:
    """Advance the vehicle by one Euler step of length dt.

    The dynamic state is updated first; the kinematic update then uses the
    updated body-frame velocities and heading rate with the pre-update
    heading (semi-implicit Euler).
    """
    if not (0.0 < dt <= 0.1):
        raise SimulationError(f"dt must be in (0, 0.1], got {dt}")
    state_vals = (kin.x_pos, kin.y_pos, kin.heading, dyn.roll, dyn.v_long, dyn.v_lat, dyn.heading_rate)
    if not all(math.isfinite(v) for v in state_vals):
        raise SimulationError("non-finite state input")

    deriv = dynamic_derivative(dyn, u, p)
    dyn_next = DynamicState.from_array(dyn.as_array() + deriv * dt)

    cos_h, sin_h = math.cos(kin.heading), math.sin(kin.heading)
    kin_next = KinematicState(
        x_pos=kin.x_pos + (dyn_next.v_long * cos_h - dyn_next.v_lat * sin_h) * dt,
        y_pos=kin.y_pos + (dyn_next.v_long * sin_h + dyn_next.v_lat * cos_h) * dt,
        heading=wrap_angle(kin.heading + dyn_next.heading_rate * dt),
    )
    return kin_next, dyn_next


# ---------------------------------------------------------------------------
# Regimes


MUD_FRICTION_FACTOR = 0.6
MUD_EXTRA_MASS = 10.0
WORN_TIRE_FRICTION_FACTOR = 0.8


def apply_regime(
    p: VehicleParams,
    regime: str,
    friction_scale: float = 1.0,
    mass_scale: float = 1.0,
) -> VehicleParams:
    """Return parameters mutated for a driving regime.

    Regimes: "nominal" (identity), "mud" (extra mass, reduced friction),
    "worn_tires" (reduced friction), "custom" (explicit scale factors).
    """
    if regime == "nominal":
        return p
    if regime == "mud":
        return replace(
            p,
            mass=p.mass + MUD_EXTRA_MASS,
            friction_coeff=p.friction_coeff * MUD_FRICTION_FACTOR,
        )
    if regime == "worn_tires":
        return replace(p, friction_coeff=p.friction_coeff * WORN_TIRE_FRICTION_FACTOR)
    if regime == "custom":
        if friction_scale <= 0 or mass_scale <= 0:
            raise SimulationError("custom regime scale factors must be positive")
        return replace(
            p,
            mass=p.mass * mass_scale,
            friction_coeff=p.friction_coeff * friction_scale,
        )
    raise SimulationError(f"unknown regime {regime!r}")


# ---------------------------------------------------------------------------
# Tracks and the scripted driver


@dataclass(frozen=True)
class TrackSpec:
    """Closed-loop track: ordered waypoints (N, 2) plus a drivable width."""

    waypoints: np.ndarray
    width: float

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 3:
            raise SimulationError("track needs at least 3 waypoints of shape (N, 2)")
        object.__setattr__(self, "waypoints", wp)

    @property
    def n(self) -> int:
        return self.waypoints.shape[0]

    def segment_lengths(self) -> np.ndarray:
        nxt = np.roll(self.waypoints, -1, axis=0)
        return np.linalg.norm(nxt - self.waypoints, axis=1)

    def circumference(self) -> float:
        return float(self.segment_lengths().sum())

    def reversed(self) -> "TrackSpec":
        return TrackSpec(self.waypoints[::-1].copy(), self.width)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"waypoints": self.waypoints.tolist(), "width": self.width}, f)

    @staticmethod
    def load(path) -> "TrackSpec":
        with open(path) as f:
            d = json.load(f)
        return TrackSpec(np.array(d["waypoints"]), float(d["width"]))


def make_oval_track(a: float = 8.0, b: float = 5.0, n: int = 128, width: float = 4.0) -> TrackSpec:
    """Elliptical track traversed counter-clockwise in waypoint order."""
    phi = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return TrackSpec(np.column_stack([a * np.cos(phi), b * np.sin(phi)]), width)


def track_for_direction(track: TrackSpec, direction: str) -> TrackSpec:
    if direction == "ccw":
        return track
    if direction == "cw":
        return track.reversed()
    raise SimulationError(f"direction must be 'cw' or 'ccw', got {direction!r}")


class ScriptedDriver:
    """Pure-pursuit steering plus proportional speed control along a track.

    Deterministic given the vehicle state.  Tracks its nearest-waypoint index
    incrementally and accumulates arc-length progress, which the dataset
    generator uses for lap counting.
    """

    def __init__(
        self,
        track: TrackSpec,
        target_speed: float,
        params: VehicleParams,
        lookahead_base: float = 1.2,
        lookahead_gain: float = 0.35,
        speed_kp: float = 0.6,
        capture_radius: float | None = None,
    ):
        self.track = track
        self.target_speed = target_speed
        self.params = params
        self.lookahead_base = lookahead_base
        self.lookahead_gain = lookahead_gain
        self.speed_kp = speed_kp
        self.capture_radius = capture_radius if capture_radius is not None else 3.0 * track.width
        self._seg_len = track.segment_lengths()
        self._idx: int | None = None
        self.progress = 0.0

    def _nearest_index(self, pos: np.ndarray) -> int:
        d = np.linalg.norm(self.track.waypoints - pos, axis=1)
        return int(np.argmin(d))

    def control(self, kin: KinematicState, dyn: DynamicState) -> Control:
        pos = np.array([kin.x_pos, kin.y_pos])
        n = self.track.n
        if self._idx is None:
            self._idx = self._nearest_index(pos)
        else:
            # local search keeps progress monotone around the loop
            window = (self._idx + np.arange(-2, 6)) % n
            d = np.linalg.norm(self.track.waypoints[window] - pos, axis=1)
            new_idx = int(window[np.argmin(d)])
            advanced = (new_idx - self._idx) % n
            if advanced <= 8:
                self.progress += self._seg_len[(self._idx + np.arange(advanced)) % n].sum()
            self._idx = new_idx

        if np.linalg.norm(self.track.waypoints[self._idx] - pos) > self.capture_radius:
            raise DriverLostError("vehicle outside capture radius of the track")

        lookahead = self.lookahead_base + self.lookahead_gain * max(dyn.v_long, 0.0)
        target, dist = self.track.waypoints[self._idx], 0.0
        j = self._idx
        while dist < lookahead:
            j = (j + 1) % n
            target = self.track.waypoints[j]
            dist += self._seg_len[(j - 1) % n]

        heading_err = wrap_angle(
            math.atan2(target[1] - pos[1], target[0] - pos[0]) - kin.heading
        )
        curvature = 2.0 * math.sin(heading_err) / max(dist, 1e-6)
        steer_angle = math.atan(self.params.wheelbase * curvature)
        steering = steer_angle / self.params.max_steer_angle

        throttle = (
            self.speed_kp * (self.target_speed - dyn.v_long)
            + self.params.drag_coeff * self.target_speed / self.params.motor_gain
        )
        return Control(steering=steering, throttle=throttle)


def start_state(track: TrackSpec, target_speed: float) -> tuple[KinematicState, DynamicState]:
    """On-track start: at waypoint 0, heading along the track, at speed."""
    p0, p1 = track.waypoints[0], track.waypoints[1]
    heading = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
    kin = KinematicState(float(p0[0]), float(p0[1]), heading)
    dyn = DynamicState(v_long=target_speed)
    return kin, dyn


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass
class EpisodeResult:
    pairs: list
    completed: bool
    termination: str  # "done", "rollover", "driver_lost"
    states: list  # (KinematicState, DynamicState) trace, noise-free

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return pairs_to_arrays(self.pairs)


class _NoiseModel:
    """Per-channel additive Gaussian noise scaled by a running RMS estimate."""

    def __init__(self, fraction: float, rng: np.random.Generator, floor: float = 1e-3):
        self.fraction = fraction
        self.rng = rng
        self.floor = floor
        self._ms = np.zeros(4)
        self._count = 0

    def corrupt(self, z: np.ndarray) -> np.ndarray:
        self._count += 1
        self._ms += (z**2 - self._ms) / self._count
        if self.fraction <= 0.0:
            return z
        sigma = self.fraction * np.maximum(np.sqrt(self._ms), self.floor)
        return z + self.rng.normal(0.0, 1.0, size=4) * sigma


def generate_dataset(
    track: TrackSpec,
    direction: str,
    laps: int,
    params: VehicleParams,
    dt: float = 0.02,
    noise_fraction: float = 0.0,
    seed: int = 0,
    target_speed: float = 4.0,
    speed_amplitude: float = 0.0,
    speed_period: float = 7.0,
    control_dither: float = 0.0,
    max_steps: int | None = None,
) -> EpisodeResult:
    """Closed-loop rollout of the scripted driver, recorded as TrainingPairs.

    Targets are finite differences of the recorded (noisy) dynamic states.
    ``speed_amplitude`` modulates the target speed sinusoidally and
    ``control_dither`` perturbs the executed controls; both provide
    excitation that keeps the input manifold identifiable for sysid runs.
    Terminates early with a flag on rollover or a lost driver.
    """
    if laps < 1:
        raise SimulationError("laps must be >= 1")
    run_track = track_for_direction(track, direction)
    driver = ScriptedDriver(run_track, target_speed, params)
    kin, dyn = start_state(run_track, target_speed)
    rng = np.random.default_rng(seed)
    noise = _NoiseModel(noise_fraction, rng)
    goal = laps * run_track.circumference()
    base_speed = max(target_speed - speed_amplitude, 0.5)
    if max_steps is None:
        max_steps = int(3.0 * goal / max(base_speed, 0.5) / dt)

    pairs: list[TrainingPair] = []
    states = [(kin, dyn)]
    z_meas = noise.corrupt(dyn.as_array())
    termination = "done"
    completed = True
    t = 0.0
    for _ in range(max_steps):
        driver.target_speed = target_speed + speed_amplitude * math.sin(
            2.0 * math.pi * t / speed_period
        )
        try:
            u = driver.control(kin, dyn)
        except DriverLostError:
            termination, completed = "driver_lost", False
            break
        if control_dither > 0.0:
            u = Control(
                steering=u.steering + control_dither * rng.standard_normal(),
                throttle=u.throttle + control_dither * rng.standard_normal(),
            )
        kin, dyn = step(kin, dyn, u, params, dt)
        states.append((kin, dyn))
        z_next = noise.corrupt(dyn.as_array())
        pairs.append(
            TrainingPair(
                x=np.concatenate([z_meas, u.as_array()]),
                y=(z_next - z_meas) / dt,
                timestamp=t,
            )
        )
        z_meas = z_next
        t += dt
        if abs(dyn.roll) >= math.pi / 2:
            termination, completed = "rollover", False
            break
        if driver.progress >= goal:
            break
    else:
        termination, completed = "timeout", False
    return EpisodeResult(pairs=pairs, completed=completed, termination=termination, states=states)


def generate_skidpad(
    params: VehicleParams,
    steering: float,
    throttle: float,
    duration: float = 6.0,
    dt: float = 0.02,
    noise_fraction: float = 0.0,
    seed: int = 0,
    initial_speed: float = 2.0,
) -> EpisodeResult:
    """Open-loop constant-control run; exercises sustained slip for sysid."""
    kin, dyn = KinematicState(), DynamicState(v_long=initial_speed)
    rng = np.random.default_rng(seed)
    noise = _NoiseModel(noise_fraction, rng)
    u = Control(steering=steering, throttle=throttle)
    pairs: list[TrainingPair] = []
    states = [(kin, dyn)]
    z_meas = noise.corrupt(dyn.as_array())
    termination, completed = "done", True
    t = 0.0
    for _ in range(int(round(duration / dt))):
        kin, dyn = step(kin, dyn, u, params, dt)
        states.append((kin, dyn))
        z_next = noise.corrupt(dyn.as_array())
        pairs.append(
            TrainingPair(
                x=np.concatenate([z_meas, u.as_array()]),
                y=(z_next - z_meas) / dt,
                timestamp=t,
            )
        )
        z_meas = z_next
        t += dt
        if abs(dyn.roll) >= math.pi / 2:
            termination, completed = "rollover", False
            break
    return EpisodeResult(pairs=pairs, completed=completed, termination=termination, states=states)


# ---------------------------------------------------------------------------
# Dataset file I/O (JSON Lines, full double precision)


def save_pairs(pairs, path) -> None:
    with open(path, "w") as f:
        for p in pairs:
            rec = {"t": p.timestamp, "x": [float(v) for v in p.x], "y": [float(v) for v in p.y]}
            f.write(json.dumps(rec) + "\n")


def load_pairs(path) -> list:
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pairs.append(TrainingPair(x=np.array(rec["x"]), y=np.array(rec["y"]), timestamp=rec["t"]))
    return pairs
