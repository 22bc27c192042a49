"""Tests for the ground-truth vehicle simulator.

The integration check compares one simulator step against a 4th-order
Runge-Kutta integration of the same continuous dynamics at a much finer
step, which serves as the independent oracle.
"""

import math

import numpy as np
import pytest

from lwpr2.dynamics import (
    Control,
    DynamicState,
    KinematicState,
    SimulationError,
    TrackSpec,
    VehicleParams,
    apply_regime,
    dynamic_derivative,
    generate_dataset,
    generate_skidpad,
    load_pairs,
    make_oval_track,
    pairs_to_arrays,
    save_pairs,
    step,
    track_for_direction,
    wrap_angle,
)


def rk4_dynamic(dyn: DynamicState, u: Control, p: VehicleParams, dt: float, substeps: int):
    """Fine-step RK4 integration of the continuous dynamic state."""
    z = dyn.as_array()
    h = dt / substeps
    for _ in range(substeps):
        k1 = dynamic_derivative(DynamicState.from_array(z), u, p)
        k2 = dynamic_derivative(DynamicState.from_array(z + 0.5 * h * k1), u, p)
        k3 = dynamic_derivative(DynamicState.from_array(z + 0.5 * h * k2), u, p)
        k4 = dynamic_derivative(DynamicState.from_array(z + h * k3), u, p)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return z


class TestStep:
    def test_zero_state_is_equilibrium(self):
        kin, dyn = step(KinematicState(), DynamicState(), Control(), VehicleParams(), 0.02)
        assert kin == KinematicState()
        assert dyn == DynamicState()

    def test_straight_line_advance_with_drag(self):
        p = VehicleParams()
        kin, dyn = step(KinematicState(), DynamicState(v_long=2.0), Control(), p, 0.1)
        # one Euler step of the drag term, then kinematics at the new speed
        v_next = 2.0 - p.drag_coeff * 2.0 * 0.1
        assert dyn.v_long == pytest.approx(v_next, abs=1e-12)
        assert kin.x_pos == pytest.approx(v_next * 0.1, abs=1e-12)
        assert kin.y_pos == 0.0
        assert kin.heading == 0.0

    def _driving_samples(self, count: int, seed: int = 0):
        """Realistic (state, control) pairs drawn from a closed-loop lap.

        The yaw mode has a ~30 ms time constant at low speed, so the
        one-step-vs-RK4 comparison is only meaningful near the driving
        manifold; arbitrary random states sit mid-transient.
        """
        p = VehicleParams()
        ep = generate_dataset(make_oval_track(), "ccw", 1, p, target_speed=4.0, seed=2)
        rng = np.random.default_rng(seed)
        samples = []
        for i in rng.choice(len(ep.pairs), count, replace=False):
            x = ep.pairs[i].x
            samples.append((DynamicState.from_array(x[:4]), Control(x[4], x[5])))
        return p, samples

    def test_matches_fine_step_rk4(self):
        p, samples = self._driving_samples(60)
        for dyn, u in samples:
            _, dyn_next = step(KinematicState(), dyn, u, p, 0.002)
            oracle = rk4_dynamic(dyn, u, p, 0.002, substeps=20)
            err = np.linalg.norm(dyn_next.as_array() - oracle)
            assert err <= 1e-3 * max(np.linalg.norm(oracle), 1.0)

    def test_integration_error_shrinks_with_dt(self):
        p, samples = self._driving_samples(30, seed=1)
        totals = {}
        for dt in (0.01, 0.002):
            errs = []
            for dyn, u in samples:
                _, dyn_next = step(KinematicState(), dyn, u, p, dt)
                oracle = rk4_dynamic(dyn, u, p, dt, substeps=100)
                errs.append(np.linalg.norm(dyn_next.as_array() - oracle))
            totals[dt] = np.mean(errs)
        assert totals[0.002] < totals[0.01] / 10.0

    def test_rejects_bad_dt(self):
        with pytest.raises(SimulationError):
            step(KinematicState(), DynamicState(), Control(), VehicleParams(), 0.0)
        with pytest.raises(SimulationError):
            step(KinematicState(), DynamicState(), Control(), VehicleParams(), 0.11)

    def test_rejects_non_finite_state(self):
        with pytest.raises(SimulationError):
            step(KinematicState(x_pos=math.nan), DynamicState(), Control(), VehicleParams(), 0.02)

    def test_heading_stays_wrapped(self):
        kin = KinematicState(heading=math.pi - 1e-3)
        dyn = DynamicState(v_long=2.0, heading_rate=1.0)
        for _ in range(200):
            kin, dyn = step(kin, dyn, Control(throttle=0.3), VehicleParams(), 0.02)
            assert -math.pi < kin.heading <= math.pi

    def test_energy_sanity_drag_only(self):
        dyn = DynamicState(v_long=5.0)
        kin = KinematicState()
        speeds = [dyn.v_long]
        for _ in range(300):
            kin, dyn = step(kin, dyn, Control(), VehicleParams(), 0.02)
            speeds.append(dyn.v_long)
        assert all(b <= a for a, b in zip(speeds, speeds[1:]))


class TestControlAndParams:
    def test_control_clamped(self):
        u = Control(steering=2.0, throttle=-3.0)
        assert u.steering == 1.0
        assert u.throttle == -1.0

    def test_params_validation(self):
        with pytest.raises(SimulationError):
            VehicleParams(mass=-1.0)
        with pytest.raises(SimulationError):
            VehicleParams(friction_coeff=2.5)


class TestRegimes:
    def test_nominal_identity(self):
        p = VehicleParams()
        assert apply_regime(p, "nominal") == p

    def test_mud(self):
        p = apply_regime(VehicleParams(), "mud")
        assert p.mass == 31.0
        assert p.friction_coeff == pytest.approx(0.6)

    def test_custom_identity(self):
        p = VehicleParams()
        assert apply_regime(p, "custom", friction_scale=1.0, mass_scale=1.0) == p

    def test_custom_rejects_nonpositive(self):
        with pytest.raises(SimulationError):
            apply_regime(VehicleParams(), "custom", friction_scale=0.0)

    def test_unknown_regime(self):
        with pytest.raises(SimulationError):
            apply_regime(VehicleParams(), "ice")

    def test_lower_friction_increases_steady_slip(self):
        """Regime monotonicity on a skidpad: less grip, more slip."""
        slips = []
        for friction in (1.0, 0.6):
            p = apply_regime(VehicleParams(), "custom", friction_scale=friction)
            ep = generate_skidpad(p, steering=0.5, throttle=0.4, duration=8.0)
            _, dyn = ep.states[-1]
            slips.append(abs(math.atan2(dyn.v_lat, max(dyn.v_long, 0.1))))
        assert slips[1] > slips[0]


class TestDriverAndDatasets:
    def test_lap_time_close_to_ideal(self):
        track = make_oval_track()
        ep = generate_dataset(track, "ccw", 1, VehicleParams(), target_speed=4.0)
        assert ep.completed
        ideal = track.circumference() / 4.0
        assert len(ep.pairs) * 0.02 == pytest.approx(ideal, rel=0.05)

    def test_cw_ccw_heading_rate_signs(self):
        track = make_oval_track()
        means = {}
        for direction in ("cw", "ccw"):
            ep = generate_dataset(track, direction, 1, VehicleParams(), target_speed=3.0)
            _, ys = ep.arrays()
            xs, _ = ep.arrays()
            means[direction] = np.mean(xs[:, 3])  # heading_rate channel
        assert means["ccw"] > 0.2
        assert means["cw"] < -0.2

    def test_noise_free_pairs_satisfy_difference_identity(self):
        ep = generate_dataset(make_oval_track(), "ccw", 1, VehicleParams(), noise_fraction=0.0)
        xs, ys = ep.arrays()
        # x_t[0:4] + dt*y_t reproduces x_{t+1}[0:4] exactly
        np.testing.assert_allclose(xs[:-1, :4] + 0.02 * ys[:-1], xs[1:, :4], atol=1e-12)

    def test_kinematic_consistency(self):
        """Recorded positions follow the documented kinematic update."""
        ep = generate_dataset(make_oval_track(), "ccw", 1, VehicleParams(), noise_fraction=0.0)
        for (kin0, _), (kin1, dyn1) in zip(ep.states, ep.states[1:]):
            c, s = math.cos(kin0.heading), math.sin(kin0.heading)
            assert kin1.x_pos == pytest.approx(
                kin0.x_pos + (dyn1.v_long * c - dyn1.v_lat * s) * 0.02, abs=1e-12
            )
            assert kin1.y_pos == pytest.approx(
                kin0.y_pos + (dyn1.v_long * s + dyn1.v_lat * c) * 0.02, abs=1e-12
            )

    def test_dataset_determinism(self):
        a = generate_dataset(make_oval_track(), "cw", 2, VehicleParams(), noise_fraction=0.01, seed=5)
        b = generate_dataset(make_oval_track(), "cw", 2, VehicleParams(), noise_fraction=0.01, seed=5)
        xa, ya = a.arrays()
        xb, yb = b.arrays()
        assert np.array_equal(xa, xb)
        assert np.array_equal(ya, yb)

    def test_rejects_zero_laps(self):
        with pytest.raises(SimulationError):
            generate_dataset(make_oval_track(), "cw", 0, VehicleParams())

    def test_bad_direction(self):
        with pytest.raises(SimulationError):
            track_for_direction(make_oval_track(), "sideways")


class TestTrackAndIo:
    def test_track_roundtrip(self, tmp_path):
        track = make_oval_track(n=32)
        path = tmp_path / "track.json"
        track.save(path)
        loaded = TrackSpec.load(path)
        assert np.array_equal(loaded.waypoints, track.waypoints)
        assert loaded.width == track.width

    def test_reversed_flips_orientation(self):
        track = make_oval_track(n=16)
        rev = track.reversed()
        assert np.array_equal(rev.waypoints, track.waypoints[::-1])
        assert rev.circumference() == pytest.approx(track.circumference())

    def test_too_few_waypoints(self):
        with pytest.raises(SimulationError):
            TrackSpec(np.zeros((2, 2)), 4.0)

    def test_pairs_roundtrip_exact(self, tmp_path):
        ep = generate_dataset(
            make_oval_track(), "ccw", 1, VehicleParams(), noise_fraction=0.01, seed=9
        )
        path = tmp_path / "pairs.jsonl"
        save_pairs(ep.pairs, path)
        loaded = load_pairs(path)
        xs, ys = pairs_to_arrays(ep.pairs)
        xl, yl = pairs_to_arrays(loaded)
        assert np.array_equal(xs, xl)
        assert np.array_equal(ys, yl)
        assert [p.timestamp for p in loaded] == [p.timestamp for p in ep.pairs]


class TestWrapAngle:
    @pytest.mark.parametrize(
        "theta,expected",
        [(0.0, 0.0), (math.pi, math.pi), (-math.pi, math.pi), (3 * math.pi, math.pi), (2 * math.pi, 0.0)],
    )
    def test_values(self, theta, expected):
        assert wrap_angle(theta) == pytest.approx(expected, abs=1e-12)

    def test_range(self):
        for theta in np.linspace(-20, 20, 401):
            w = wrap_angle(float(theta))
            assert -math.pi < w <= math.pi
