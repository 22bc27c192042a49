"""Sampling-based model predictive control (path-integral style).

Rolls out the current network snapshot over sampled control perturbations,
weights trajectories by exponentiated negative cost, and returns the
weighted-average control sequence shifted by one step.  The dynamics used in
rollouts are the exact kinematic update plus network-predicted derivatives of
the dynamic state, mirroring the simulator's integration scheme.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from lwpr2.dynamics import Control, DynamicState, KinematicState, TrackSpec
from lwpr2.mlp import MlpParams, forward_batch
from lwpr2.standardize import Standardizer

MIN_SLIP_SPEED = 0.3


@dataclass
class MppiConfig:
    num_rollouts: int = 1024
    horizon: int = 60
    dt: float = 0.02
    temperature: float = 0.25
    noise_std: tuple = (0.30, 0.20)  # steering, throttle
    max_slip_deg: float = 13.0
    target_speed: float = 8.0
    cross_track_weight: float = 10.0
    speed_weight: float = 2.0
    crash_penalty: float = 1e6
    slip_penalty: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.num_rollouts < 1 or self.horizon < 1:
            raise ValueError("num_rollouts and horizon must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_slip_deg <= 0:
            raise ValueError("max_slip_deg must be positive")


class NetDynamics:
    """Network snapshot + frozen standardization, viewed as a derivative map."""

    def __init__(self, net: MlpParams, std: Standardizer):
        self.net = net
        self.std = std

    def derivatives(self, dyn: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """dyn (n, 4), controls (n, 2) -> d(dyn)/dt (n, 4), raw units."""
        x = np.hstack([dyn, controls])
        y_std = forward_batch(self.net, self.std.transform_x(x))
        return self.std.inverse_y(y_std)


class TrackGeometry:
    """Windowed nearest-segment queries along a closed polyline."""

    WINDOW = np.arange(-2, 7)

    def __init__(self, track: TrackSpec):
        self.track = track
        self.p = track.waypoints
        self.q = np.roll(self.p, -1, axis=0)
        self.v = self.q - self.p
        self.l2 = np.maximum(np.sum(self.v**2, axis=1), 1e-12)
        self.n = track.n

    def nearest_segment(self, point: np.ndarray) -> int:
        t = np.clip(((point[None, :] - self.p) * self.v).sum(axis=1) / self.l2, 0.0, 1.0)
        proj = self.p + t[:, None] * self.v
        return int(np.argmin(np.sum((point[None, :] - proj) ** 2, axis=1)))

    def advance(self, points: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-point cross-track distance and updated segment index.

        Searches a small window around the previous index, so consecutive
        calls must be along continuous trajectories.
        """
        cand = (idx[:, None] + self.WINDOW[None, :]) % self.n  # (r, k)
        p = self.p[cand]
        v = self.v[cand]
        l2 = self.l2[cand]
        rel = points[:, None, :] - p
        t = np.clip(np.sum(rel * v, axis=2) / l2, 0.0, 1.0)
        proj = p + t[..., None] * v
        d2 = np.sum((points[:, None, :] - proj) ** 2, axis=2)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(points))
        return np.sqrt(d2[rows, best]), cand[rows, best]


def _integrate_rollouts(
    model: NetDynamics,
    kin: KinematicState,
    dyn: DynamicState,
    seqs: np.ndarray,  # (r, h, 2), already clipped
    geometry: TrackGeometry,
    cfg: MppiConfig,
) -> np.ndarray:
    """Roll every control sequence forward and return per-rollout cost."""
    r, h, _ = seqs.shape
    pos = np.tile([kin.x_pos, kin.y_pos], (r, 1))
    heading = np.full(r, kin.heading)
    z = np.tile(dyn.as_array(), (r, 1))
    idx = np.full(r, geometry.nearest_segment(np.array([kin.x_pos, kin.y_pos])))
    costs = np.zeros(r)
    alive = np.ones(r, dtype=bool)
    half_width = geometry.track.width / 2.0
    max_slip = math.radians(cfg.max_slip_deg)

    for t in range(h):
        deriv = model.derivatives(z[alive], seqs[alive, t, :])
        finite = np.all(np.isfinite(deriv), axis=1)
        if not np.all(finite):
            # a diverged model prediction makes the whole rollout
            # meaningless, so exclude it entirely
            dead = np.flatnonzero(alive)[~finite]
            costs[dead] = np.inf
            alive[dead] = False
            deriv = deriv[finite]
            if not np.any(alive):
                break
        z[alive] = z[alive] + deriv * cfg.dt
        cos_h, sin_h = np.cos(heading[alive]), np.sin(heading[alive])
        vx = z[alive, 1] * cos_h - z[alive, 2] * sin_h
        vy = z[alive, 1] * sin_h + z[alive, 2] * cos_h
        pos[alive, 0] += vx * cfg.dt
        pos[alive, 1] += vy * cfg.dt
        heading[alive] = heading[alive] + z[alive, 3] * cfg.dt

        cross, idx_new = geometry.advance(pos[alive], idx[alive])
        idx[alive] = idx_new
        slip = np.arctan2(z[alive, 2], np.maximum(np.abs(z[alive, 1]), MIN_SLIP_SPEED))
        step_cost = (
            cfg.cross_track_weight * cross**2
            + cfg.speed_weight * (z[alive, 1] - cfg.target_speed) ** 2
            + np.where(np.abs(slip) > max_slip, cfg.slip_penalty, 0.0)
            + np.where(cross > half_width, cfg.crash_penalty, 0.0)
        )
        costs[alive] += step_cost
    return costs


def rollout_cost(
    model: NetDynamics,
    kin: KinematicState,
    dyn: DynamicState,
    seq: np.ndarray,  # (h, 2)
    track: TrackSpec,
    cfg: MppiConfig,
) -> float:
    """Cost of a single control sequence (clipped to the control box)."""
    geometry = TrackGeometry(track)
    seqs = np.clip(np.asarray(seq, dtype=float)[None, :, :], -1.0, 1.0)
    return float(_integrate_rollouts(model, kin, dyn, seqs, geometry, cfg)[0])


@dataclass
class MppiStepInfo:
    best_cost: float
    mean_cost: float
    weights_sum: float
    predictions_per_second: float
    emergency: bool = False


class MppiController:
    """Receding-horizon controller over a network snapshot."""

    def __init__(self, track: TrackSpec, cfg: MppiConfig):
        self.track = track
        self.cfg = cfg
        self.geometry = TrackGeometry(track)
        self.prev_seq = np.zeros((cfg.horizon, 2))
        self.rng = np.random.default_rng(cfg.seed)
        self.last_info: MppiStepInfo | None = None

    def reset(self) -> None:
        self.prev_seq = np.zeros((self.cfg.horizon, 2))
        self.rng = np.random.default_rng(self.cfg.seed)

    def step(self, model: NetDynamics, kin: KinematicState, dyn: DynamicState):
        """Return the control to execute now; updates the nominal sequence."""
        cfg = self.cfg
        t0 = time.perf_counter()
        noise = self.rng.standard_normal((cfg.num_rollouts, cfg.horizon, 2)) * np.asarray(
            cfg.noise_std
        )
        seqs = np.clip(self.prev_seq[None, :, :] + noise, -1.0, 1.0)
        costs = _integrate_rollouts(model, kin, dyn, seqs, self.geometry, cfg)
        elapsed = max(time.perf_counter() - t0, 1e-9)

        finite = np.isfinite(costs)
        if not np.any(finite):
            self.last_info = MppiStepInfo(np.inf, np.inf, 0.0, 0.0, emergency=True)
            self.prev_seq = np.zeros((cfg.horizon, 2))
            return Control(0.0, 0.0)

        costs = np.where(finite, costs, np.inf)
        c_min = costs.min()
        w = np.exp(-(costs - c_min) / cfg.temperature)
        w_sum = w.sum()
        w_norm = w / w_sum
        new_seq = np.einsum("r,rhc->hc", w_norm, seqs)

        self.last_info = MppiStepInfo(
            best_cost=float(c_min),
            mean_cost=float(costs[finite].mean()),
            weights_sum=float(w_norm.sum()),
            predictions_per_second=cfg.num_rollouts * cfg.horizon / elapsed,
        )
        u = Control(float(new_seq[0, 0]), float(new_seq[0, 1]))
        self.prev_seq = np.vstack([new_seq[1:], new_seq[-1:]])
        return u
