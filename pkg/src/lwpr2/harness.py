"""Experiment protocols and reporting.

Implements the three test modes (offline / online / active) with prequential
error accounting, the catastrophic-interference, modified-dynamics, active
driving, and soak protocols at desk scale, and the FLOP accounting tables.
All randomness flows from a single protocol seed; identical seeds yield
byte-identical reports.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from lwpr2 import dynamics as dyn_mod
from lwpr2.dynamics import (
    Control,
    DynamicState,
    KinematicState,
    TrainingPair,
    TrackSpec,
    VehicleParams,
    apply_regime,
    make_oval_track,
    pairs_to_arrays,
    start_state,
    step,
)
from lwpr2.lwpr import OUTPUT_NAMES
from lwpr2.mlp import flop_count, forward_batch
from lwpr2.mppi import MppiConfig, MppiController, NetDynamics, TrackGeometry
from lwpr2.trainer import (
    InitializedModels,
    OnlineTrainer,
    TrainerConfig,
    initialize_joint,
    write_step_reports,
)

CHANNEL_LABELS = ("roll_rate", "long_acc", "lat_acc", "heading_acc")


class SpecError(ValueError):
    """Invalid experiment specification."""


# ---------------------------------------------------------------------------
# Metrics


class MetricsAccumulator:
    """Per-channel squared-error accumulation.

    Per-channel MSEs are reported in raw units; the cross-channel "total"
    is the unweighted mean of the four per-channel MSEs in standardized
    units, so channels with different physical units combine sensibly.
    """

    def __init__(self):
        self.sse_raw = np.zeros(4)
        self.sse_std = np.zeros(4)
        self.count = 0

    def add(self, residual_raw: np.ndarray, residual_std: np.ndarray) -> None:
        if not np.all(np.isfinite(residual_raw)):
            return
        self.sse_raw += residual_raw**2
        self.sse_std += residual_std**2
        self.count += 1

    def per_channel_mse(self) -> np.ndarray:
        if self.count == 0:
            raise SpecError("no samples accumulated")
        return self.sse_raw / self.count

    def per_channel_mse_std(self) -> np.ndarray:
        if self.count == 0:
            raise SpecError("no samples accumulated")
        return self.sse_std / self.count

    def total_mse(self) -> float:
        return float(self.per_channel_mse_std().mean())

    def row(self) -> dict:
        raw = self.per_channel_mse()
        return {
            **{CHANNEL_LABELS[i]: float(raw[i]) for i in range(4)},
            "total_mse": self.total_mse(),
            "count": self.count,
        }


def write_metrics_table(rows: dict, path) -> None:
    """rows: ordered mapping method -> MetricsAccumulator.row() dict."""
    cols = ["method", *CHANNEL_LABELS, "total_mse", "count"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for method, row in rows.items():
            vals = [method] + [repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols[1:]]
            f.write(",".join(vals) + "\n")


def format_metrics_table(rows: dict, title: str) -> str:
    lines = [title, "-" * len(title)]
    header = f"{'method':<10}" + "".join(f"{c:>14}" for c in CHANNEL_LABELS) + f"{'total':>12}"
    lines.append(header)
    for method, row in rows.items():
        lines.append(
            f"{method:<10}"
            + "".join(f"{row[c]:>14.4f}" for c in CHANNEL_LABELS)
            + f"{row['total_mse']:>12.4f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Scenario configuration


@dataclass
class HarnessConfig:
    dt: float = 0.02
    track_a: float = 8.0
    track_b: float = 5.0
    track_n: int = 160
    track_width: float = 4.0
    sysid_speeds: tuple = (3.0, 5.0)
    sysid_laps_per_setting: int = 3
    sysid_speed_amplitude: float = 1.0
    sysid_speed_period: float = 7.0
    sysid_control_dither: float = 0.05
    skidpad_steerings: tuple = (-0.8, -0.45, 0.45, 0.8)
    skidpad_throttle: float = 0.55
    skidpad_duration: float = 6.0
    noise_fraction: float = 0.005
    stream_speed: float = 3.5
    stream_laps: int = 18
    validation_laps: int = 4
    mud_laps: int = 5
    active_trials: int = 5
    active_laps: int = 6
    active_target_speed: float = 4.5
    active_control_every: int = 2  # simulator steps per MPC re-plan
    soak_segment_laps: int = 3
    soak_segments: int = 6
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def make_track(self) -> TrackSpec:
        return make_oval_track(self.track_a, self.track_b, self.track_n, self.track_width)


def _config_to_flat(cfg: HarnessConfig) -> dict:
    flat = {}
    for k, v in cfg.__dict__.items():
        if isinstance(v, TrainerConfig):
            for tk, tv in v.__dict__.items():
                flat[f"trainer.{tk}"] = tv
        else:
            flat[k] = v
    return flat


def load_config(path=None, overrides=None) -> HarnessConfig:
    """Build a HarnessConfig from a key=value file plus overrides.

    Keys match the dataclass fields; trainer fields are namespaced as
    ``trainer.<field>``.  Tuples are comma-separated values.
    """
    cfg = HarnessConfig()
    items = {}
    if path is not None:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise SpecError(f"bad config line: {line!r}")
                k, v = line.split("=", 1)
                items[k.strip()] = v.strip()
    if overrides:
        items.update(overrides)

    base = _config_to_flat(cfg)
    for k, v in items.items():
        if k not in base:
            raise SpecError(f"unknown config key {k!r}")
        current = base[k]
        if isinstance(current, bool):
            parsed = v in ("1", "true", "True")
        elif isinstance(current, int):
            parsed = int(v)
        elif isinstance(current, float):
            parsed = float(v)
        elif isinstance(current, tuple):
            parsed = tuple(float(s) for s in str(v).split(","))
        else:
            parsed = v
        base[k] = parsed

    trainer_kwargs = {k.split(".", 1)[1]: v for k, v in base.items() if k.startswith("trainer.")}
    harness_kwargs = {k: v for k, v in base.items() if not k.startswith("trainer.")}
    return HarnessConfig(trainer=TrainerConfig(**trainer_kwargs), **harness_kwargs)


# ---------------------------------------------------------------------------
# Dataset builders


def build_sysid_dataset(seed: int, cfg: HarnessConfig, regime: str = "nominal") -> list:
    """Mixed-direction, multi-speed track laps plus skidpad maneuvers."""
    params = apply_regime(VehicleParams(), regime)
    track = cfg.make_track()
    pairs = []
    sub = 0
    for direction in ("cw", "ccw"):
        for speed in cfg.sysid_speeds:
            ep = dyn_mod.generate_dataset(
                track,
                direction,
                cfg.sysid_laps_per_setting,
                params,
                dt=cfg.dt,
                noise_fraction=cfg.noise_fraction,
                seed=seed * 997 + sub,
                target_speed=speed,
                speed_amplitude=cfg.sysid_speed_amplitude,
                speed_period=cfg.sysid_speed_period,
                control_dither=cfg.sysid_control_dither,
            )
            pairs.extend(ep.pairs)
            sub += 1
    for steering in cfg.skidpad_steerings:
        ep = dyn_mod.generate_skidpad(
            params,
            steering,
            cfg.skidpad_throttle,
            duration=cfg.skidpad_duration,
            dt=cfg.dt,
            noise_fraction=cfg.noise_fraction,
            seed=seed * 997 + sub,
        )
        pairs.extend(ep.pairs)
        sub += 1
    return pairs


def build_stream(
    seed: int,
    cfg: HarnessConfig,
    direction: str = "cw",
    laps: int | None = None,
    regime: str = "nominal",
    speed: float | None = None,
) -> list:
    params = apply_regime(VehicleParams(), regime)
    track = cfg.make_track()
    ep = dyn_mod.generate_dataset(
        track,
        direction,
        laps if laps is not None else cfg.stream_laps,
        params,
        dt=cfg.dt,
        noise_fraction=cfg.noise_fraction,
        seed=seed,
        target_speed=speed if speed is not None else cfg.stream_speed,
    )
    return ep.pairs


# ---------------------------------------------------------------------------
# Offline / online evaluation


def evaluate_offline(models: InitializedModels, method: str, pairs) -> MetricsAccumulator:
    """Frozen evaluation: no model state is touched."""
    xs_raw, ys_raw = pairs_to_arrays(pairs)
    xs = models.standardizer.transform_x(xs_raw)
    ys = models.standardizer.transform_y(ys_raw)
    if method == "lwpr-only":
        preds, _ = models.lwpr.predict_batch(xs)
    else:
        preds = forward_batch(models.net, xs)
    residual_std = ys - preds
    residual_raw = residual_std * models.standardizer.y_scale
    acc = MetricsAccumulator()
    for rr, rs in zip(residual_raw, residual_std):
        acc.add(rr, rs)
    return acc


def run_online(
    models: InitializedModels,
    method: str,
    pairs,
    cfg: HarnessConfig,
    lr: float | None = None,
) -> tuple[OnlineTrainer, MetricsAccumulator, list]:
    """Prequential online run over a stream; models are deep-copied first."""
    trainer = OnlineTrainer(copy.deepcopy(models), cfg.trainer, method=method, lr=lr)
    acc = MetricsAccumulator()
    residuals = []
    for pair in pairs:
        rep = trainer.ingest(pair)
        if not rep.dropped:
            acc.add(rep.residual_raw, rep.residual_std)
            residuals.append(rep.residual_std)
    return trainer, acc, residuals


# ---------------------------------------------------------------------------
# Protocols


def catastrophic_interference_protocol(
    seed: int, cfg: HarnessConfig, methods=None, models: InitializedModels | None = None
) -> dict:
    """Monotonous one-direction adaptation, then frozen opposite-direction
    retention evaluation of every final model."""
    methods = methods or ["none", "sgd", "lwpr2", "lwpr-only"]
    if models is None:
        sysid = build_sysid_dataset(seed, cfg)
        models = initialize_joint(sysid, replace(cfg.trainer, seed=seed))
    stream = build_stream(seed * 31 + 1, cfg, direction="cw")
    validation = build_stream(seed * 31 + 2, cfg, direction="ccw", laps=cfg.validation_laps)

    phase1, phase2 = {}, {}
    finals = {}
    for method in methods:
        if method == "none":
            phase1[method] = evaluate_offline(models, method, stream).row()
            phase2[method] = evaluate_offline(models, method, validation).row()
            continue
        trainer, acc, _ = run_online(models, method, stream, cfg)
        phase1[method] = acc.row()
        final = copy.deepcopy(models)
        final = replace_models(final, net=trainer.net, lwpr=trainer.lwpr)
        phase2[method] = evaluate_offline(final, method, validation).row()
        finals[method] = trainer
    return {
        "seed": seed,
        "phase1": phase1,
        "phase2": phase2,
        "lwpr_field_counts": models.lwpr_field_counts,
        "gmm_k": models.gmm.k,
    }


def replace_models(models: InitializedModels, net=None, lwpr=None) -> InitializedModels:
    out = copy.copy(models)
    if net is not None:
        out.net = net
    if lwpr is not None:
        out.lwpr = lwpr
    return out


def modified_dynamics_protocol(
    seed: int,
    cfg: HarnessConfig,
    methods=None,
    regime: str = "mud",
    models: InitializedModels | None = None,
) -> dict:
    """Online adaptation on a stream from a shifted dynamics regime."""
    methods = methods or ["none", "sgd", "lwpr2", "lwpr-only"]
    if models is None:
        sysid = build_sysid_dataset(seed, cfg)
        models = initialize_joint(sysid, replace(cfg.trainer, seed=seed))
    stream = build_stream(seed * 31 + 3, cfg, direction="cw", laps=cfg.mud_laps, regime=regime)
    if len(stream) == 0:
        raise SpecError("empty modified-dynamics stream")

    table = {}
    for method in methods:
        if method == "none":
            table[method] = evaluate_offline(models, method, stream).row()
        else:
            _, acc, _ = run_online(models, method, stream, cfg)
            table[method] = acc.row()
    return {"seed": seed, "table": table}


def default_mppi(cfg: HarnessConfig) -> MppiConfig:
    """Active-mode controller budget: re-plans every ``active_control_every``
    simulator steps with a rollout horizon matched to that period."""
    return MppiConfig(
        num_rollouts=512,
        horizon=30,
        dt=cfg.dt * max(1, cfg.active_control_every),
        target_speed=cfg.active_target_speed,
    )


@dataclass
class TrialResult:
    laps_completed: int
    lap_times: list
    lap_mse: list  # standardized total MSE per completed lap
    termination: str
    trial_mse: float
    predictions_per_second: float


def run_active_trial(
    models: InitializedModels,
    method: str,
    cfg: HarnessConfig,
    mppi_cfg: MppiConfig,
    seed: int,
    regime: str = "mud",
    laps: int | None = None,
) -> TrialResult:
    """One closed-loop trial: MPC drives the true (shifted-regime) vehicle
    with the adapting model; prequential errors feed the lap metrics."""
    laps = laps if laps is not None else cfg.active_laps
    params = apply_regime(VehicleParams(), regime)
    track = cfg.make_track().reversed()  # clockwise driving
    trainer = OnlineTrainer(
        copy.deepcopy(models),
        replace(cfg.trainer, seed=seed),
        method=method,
        lr=cfg.trainer.active_preset().lr,
    )
    controller = MppiController(track, replace(mppi_cfg, seed=seed))
    geometry = TrackGeometry(track)
    kin, dyn = start_state(track, mppi_cfg.target_speed * 0.5)
    rng = np.random.default_rng(seed + 17)
    noise = dyn_mod._NoiseModel(cfg.noise_fraction, rng)
    z_meas = noise.corrupt(dyn.as_array())

    seg_len = track.segment_lengths()
    circumference = track.circumference()
    idx = geometry.nearest_segment(np.array([kin.x_pos, kin.y_pos]))
    progress = 0.0
    lap_start_t = 0.0
    lap_times, lap_mse = [], []
    lap_acc = MetricsAccumulator()
    total_acc = MetricsAccumulator()
    termination = "done"
    preds_per_sec = []
    t = 0.0
    max_steps = int(laps * circumference / (0.3 * mppi_cfg.target_speed) / cfg.dt)
    # re-plan every active_control_every simulator steps; the simulator and
    # the learner keep running at full rate in between
    control_every = max(1, cfg.active_control_every)
    u = Control(0.0, 0.0)

    for sim_step in range(max_steps):
        if sim_step % control_every == 0:
            model = NetDynamics(trainer.snapshot(), trainer.std)
            u = controller.step(model, kin, dyn)
            if controller.last_info is not None:
                preds_per_sec.append(controller.last_info.predictions_per_second)
        kin, dyn = step(kin, dyn, u, params, cfg.dt)
        t += cfg.dt
        z_next = noise.corrupt(dyn.as_array())
        pair = TrainingPair(
            x=np.concatenate([z_meas, u.as_array()]),
            y=(z_next - z_meas) / cfg.dt,
            timestamp=t,
        )
        z_meas = z_next
        rep = trainer.ingest(pair)
        if not rep.dropped:
            lap_acc.add(rep.residual_raw, rep.residual_std)
            total_acc.add(rep.residual_raw, rep.residual_std)

        # lap accounting via arc progress along the track
        pos = np.array([kin.x_pos, kin.y_pos])
        cross, new_idx = geometry.advance(pos[None, :], np.array([idx]))
        new_idx = int(new_idx[0])
        advanced = (new_idx - idx) % track.n
        if advanced <= 10:
            progress += seg_len[(idx + np.arange(advanced)) % track.n].sum()
        idx = new_idx

        if abs(dyn.roll) >= math.pi / 2:
            termination = "rollover"
            break
        if float(cross[0]) > 1.5 * track.width:
            termination = "off_track"
            break
        if progress >= (len(lap_times) + 1) * circumference:
            lap_times.append(t - lap_start_t)
            lap_start_t = t
            lap_mse.append(lap_acc.total_mse() if lap_acc.count else float("nan"))
            lap_acc = MetricsAccumulator()
            if len(lap_times) >= laps:
                break
    else:
        termination = "timeout"

    return TrialResult(
        laps_completed=len(lap_times),
        lap_times=lap_times,
        lap_mse=lap_mse,
        termination=termination,
        trial_mse=total_acc.total_mse() if total_acc.count else float("nan"),
        predictions_per_second=float(np.mean(preds_per_sec)) if preds_per_sec else 0.0,
    )


def active_protocol(
    seed: int,
    cfg: HarnessConfig,
    methods=None,
    mppi_cfg: MppiConfig | None = None,
    models: InitializedModels | None = None,
) -> dict:
    """Closed-loop MPC trials under a regime the base model never saw."""
    methods = methods or ["none", "sgd", "lwpr2"]
    if models is None:
        sysid = build_sysid_dataset(seed, cfg)
        models = initialize_joint(sysid, replace(cfg.trainer, seed=seed))
    if mppi_cfg is None:
        mppi_cfg = default_mppi(cfg)

    table = {}
    for method in methods:
        trials = [
            run_active_trial(models, method, cfg, mppi_cfg, seed=seed * 100 + trial)
            for trial in range(cfg.active_trials)
        ]
        completed = [tr.laps_completed for tr in trials]
        all_times = [tt for tr in trials for tt in tr.lap_times]
        table[method] = {
            "avg_laps_completed": float(np.mean(completed)),
            "avg_trial_mse": float(np.mean([tr.trial_mse for tr in trials])),
            "avg_lap_time": float(np.mean(all_times)) if all_times else float("nan"),
            "trials": trials,
        }
    return {"seed": seed, "table": table, "laps_per_trial": cfg.active_laps}


def soak_protocol(
    seed: int,
    cfg: HarnessConfig,
    checkpoint_dir,
    n_restores: int = 3,
    models: InitializedModels | None = None,
) -> dict:
    """Long alternating-regime stream with mid-run checkpoint/restore cycles.

    The trainer is checkpointed and reloaded between segments; windowed MSE
    around each restore is recorded so discontinuities are visible.
    """
    os.makedirs(checkpoint_dir, exist_ok=True)
    if models is None:
        sysid = build_sysid_dataset(seed, cfg)
        models = initialize_joint(sysid, replace(cfg.trainer, seed=seed))
    trainer = OnlineTrainer(copy.deepcopy(models), replace(cfg.trainer, seed=seed), method="lwpr2")

    segments = []
    for s in range(cfg.soak_segments):
        regime = "nominal" if s % 2 == 0 else "mud"
        segments.append(
            (
                regime,
                build_stream(
                    seed * 101 + s, cfg, direction="cw", laps=cfg.soak_segment_laps, regime=regime
                ),
            )
        )

    restore_points = set(
        np.linspace(1, len(segments) - 1, min(n_restores, len(segments) - 1), dtype=int).tolist()
    )
    window = 100
    windows = []
    segment_mse = []
    recent = []
    for s, (regime, pairs) in enumerate(segments):
        if s in restore_points:
            ckpt = os.path.join(checkpoint_dir, f"soak_{seed}_{s}.npz")
            trainer.save_checkpoint(ckpt)
            trainer = OnlineTrainer.load_checkpoint(ckpt)
        acc = MetricsAccumulator()
        for pair in pairs:
            rep = trainer.ingest(pair)
            if rep.dropped:
                continue
            acc.add(rep.residual_raw, rep.residual_std)
            recent.append(float(np.mean(rep.residual_std**2)))
            if len(recent) > window:
                recent.pop(0)
        segment_mse.append({"regime": regime, "total_mse": acc.total_mse(), "count": acc.count})
        windows.append(float(np.mean(recent)))
    return {
        "seed": seed,
        "segments": segment_mse,
        "window_mse": windows,
        "restores": sorted(restore_points),
        "final_trainer": trainer,
        "models": models,
    }


def bench_flops(models: InitializedModels) -> dict:
    """Network per-layer FLOPs plus LWPR activation lower bounds."""
    return {"network": flop_count(), "lwpr": models.lwpr.flop_lower_bound()}


def format_flops(report: dict) -> str:
    lines = ["Network FLOPs per prediction", "-" * 32]
    for row in report["network"]["rows"]:
        lines.append(f"  {row['layer']:<8} {row['flops']:>8}")
    lines.append(f"  row sum  {report['network']['total']:>8}")
    lines.append(f"  (reference printed total: {report['network']['reference_total']})")
    lines.append("")
    lines.append("LWPR FLOP lower bound (25 per receptive field)")
    lines.append("-" * 46)
    for row in report["lwpr"]["rows"]:
        lines.append(f"  {row['output']:<14} {row['fields']:>8} fields  >= {row['flops']:>10}")
    lines.append(
        f"  {'total':<14} {report['lwpr']['total_fields']:>8} fields  >= {report['lwpr']['total_flops']:>10}"
    )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Generic experiment runner (CLI entry)


@dataclass
class ExperimentSpec:
    mode: str  # offline | online | active
    method: str = "lwpr2"
    seed: int = 0
    dataset: str | None = None  # JSONL stream for offline/online
    sysid: str | None = None  # JSONL sysid dataset (for initialization)
    output_dir: str = "results"

    def validate(self) -> None:
        if self.mode not in ("offline", "online", "active"):
            raise SpecError(f"unknown mode {self.mode!r}")
        if self.method not in ("none", "sgd", "lwpr2", "lwpr-only"):
            raise SpecError(f"unknown method {self.method!r}")
        if self.mode in ("offline", "online") and not self.dataset:
            raise SpecError(f"{self.mode} mode requires a dataset")


def run_experiment(spec: ExperimentSpec, cfg: HarnessConfig) -> dict:
    """Execute one experiment spec; emits CSV metrics and the step-report
    stream under the output directory."""
    spec.validate()
    os.makedirs(spec.output_dir, exist_ok=True)
    if spec.sysid:
        sysid = dyn_mod.load_pairs(spec.sysid)
    else:
        sysid = build_sysid_dataset(spec.seed, cfg)
    models = initialize_joint(sysid, replace(cfg.trainer, seed=spec.seed))

    if spec.mode == "offline":
        pairs = dyn_mod.load_pairs(spec.dataset)
        acc = evaluate_offline(models, spec.method, pairs)
        rows = {spec.method: acc.row()}
        write_metrics_table(rows, os.path.join(spec.output_dir, "metrics.csv"))
        return {"table": rows}

    if spec.mode == "online":
        pairs = dyn_mod.load_pairs(spec.dataset)
        trainer, acc, _ = run_online(models, spec.method, pairs, cfg)
        rows = {spec.method: acc.row()}
        write_metrics_table(rows, os.path.join(spec.output_dir, "metrics.csv"))
        write_step_reports(trainer.reports, os.path.join(spec.output_dir, "steps.csv"))
        return {"table": rows}

    mppi_cfg = default_mppi(cfg)
    trial = run_active_trial(models, spec.method, cfg, mppi_cfg, seed=spec.seed)
    out = {
        "laps_completed": trial.laps_completed,
        "lap_times": trial.lap_times,
        "lap_mse": trial.lap_mse,
        "termination": trial.termination,
        "trial_mse": trial.trial_mse,
        "predictions_per_second": trial.predictions_per_second,
    }
    with open(os.path.join(spec.output_dir, "active.json"), "w") as f:
        json.dump(out, f, indent=2)
    return out
