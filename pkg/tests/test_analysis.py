"""Controller analysis toolkit: step response, frequency split, tap locality."""

import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidnet.analysis import (
    ControllerGains,
    PlantSpec,
    SimulationDiverged,
    frequency_response,
    locality_ratio,
    plant_step,
    receptive_field_expansion,
    simulate_step,
)


def analytic_underdamped_step(t, wn, zeta, dc):
    """Closed-form unit-step response of the second-order plant (zeta < 1)."""
    wd = wn * math.sqrt(1.0 - zeta * zeta)
    decay = np.exp(-zeta * wn * t)
    phase = np.cos(wd * t) + (zeta / math.sqrt(1.0 - zeta * zeta)) * np.sin(wd * t)
    return dc * (1.0 - decay * phase)


def enumerate_taps(kernels, strides):
    """Brute-force oracle: walk every tap choice, tally input offsets."""
    halves = [(k - 1) // 2 for k in kernels]
    jumps = []
    j = 1
    for s in strides:
        jumps.append(j)
        j *= s
    tally = Counter()
    for combo in itertools.product(*[range(-h, h + 1) for h in halves]):
        tally[sum(d * j for d, j in zip(combo, jumps))] += 1
    return tally


class TestPlantIntegration:
    def test_rk4_matches_closed_form_step_response(self):
        wn, zeta, dc, dt = 1.0, 0.5, 1.0, 0.01
        plant = PlantSpec(natural_freq=wn, damping=zeta, dc_gain=dc)
        n = 1000
        state = np.zeros(2)
        ys = np.zeros(n)
        for i in range(n):
            ys[i] = state[0]
            state = plant_step(plant, state, 1.0, dt)
        t = np.arange(n) * dt
        expected = analytic_underdamped_step(t, wn, zeta, dc)
        assert np.max(np.abs(ys - expected)) < 1e-8

    def test_rk4_matches_closed_form_other_plant(self):
        wn, zeta, dc, dt = 2.0, 0.2, 1.5, 0.005
        plant = PlantSpec(natural_freq=wn, damping=zeta, dc_gain=dc)
        state = np.zeros(2)
        for _ in range(2000):
            state = plant_step(plant, state, 1.0, dt)
        expected = analytic_underdamped_step(np.array([2000 * dt]), wn, zeta, dc)[0]
        assert abs(state[0] - expected) < 1e-8


class TestStepSimulation:
    def test_zero_gains_leave_output_at_rest(self):
        res = simulate_step(ControllerGains(0.0, 0.0, 0.0))
        assert np.all(res.y == 0.0)
        assert np.all(res.e == 1.0)
        assert np.all(res.c == 0.0)
        assert res.overshoot == 0.0

    def test_loop_is_linear_in_setpoint(self):
        gains = ControllerGains(1.0, 0.8, 0.4)
        one = simulate_step(gains, setpoint=1.0)
        two = simulate_step(gains, setpoint=2.0)
        assert np.array_equal(two.y, 2.0 * one.y)

    def test_integral_action_removes_steady_state_error(self):
        res = simulate_step(ControllerGains(1.0, 0.8, 0.0), horizon=60.0)
        assert res.steady_state_error < 1e-3

    def test_proportional_only_keeps_offset(self):
        plant = PlantSpec(natural_freq=1.0, damping=0.5, dc_gain=1.0)
        res = simulate_step(ControllerGains(1.0, 0.0, 0.0), plant, horizon=60.0)
        # dc loop gain kp*dc/(1+kp*dc) leaves e_ss = 1/(1+kp*dc) = 0.5
        assert abs(res.steady_state_error - 0.5) < 1e-3

    @pytest.mark.parametrize("kd", [0.1, 0.2, 0.4])
    def test_derivative_gain_cuts_overshoot(self, kd):
        pi = simulate_step(ControllerGains(1.0, 0.8, 0.0))
        pid = simulate_step(ControllerGains(1.0, 0.8, kd))
        assert pi.overshoot > 0.05
        assert pid.overshoot < pi.overshoot

    def test_overshoot_reduction_is_substantial_at_designated_gains(self):
        pi = simulate_step(ControllerGains(1.0, 0.8, 0.0))
        pid = simulate_step(ControllerGains(1.0, 0.8, 0.4))
        assert (pi.overshoot - pid.overshoot) / pi.overshoot >= 0.2

    def test_trace_fields_are_consistent(self):
        res = simulate_step(ControllerGains(1.0, 0.8, 0.4), dt=0.01, horizon=5.0)
        assert len(res.t) == len(res.y) == len(res.e) == len(res.c) == 500
        assert res.dt == 0.01
        assert np.allclose(res.e, res.setpoint - res.y)

    def test_unstable_loop_raises_divergence(self):
        with pytest.raises(SimulationDiverged) as exc:
            simulate_step(ControllerGains(1.0, 80.0, 0.0), horizon=30.0)
        assert exc.value.value > 1e6 or exc.value.value < -1e6

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            simulate_step(ControllerGains(1.0, 0.8, 0.0), dt=0.0)
        with pytest.raises(ValueError):
            simulate_step(ControllerGains(1.0, 0.8, 0.0), horizon=-1.0)
        with pytest.raises(ValueError):
            simulate_step(ControllerGains(1.0, 0.8, 0.0), PlantSpec(natural_freq=0.0))
        with pytest.raises(ValueError):
            simulate_step(ControllerGains(1.0, 0.8, 0.0), PlantSpec(damping=-0.1))
        with pytest.raises(ValueError):
            # dt too coarse for the fixed-step integrator
            simulate_step(ControllerGains(1.0, 0.8, 0.0), PlantSpec(natural_freq=20.0), dt=0.01)


class TestFrequencyResponse:
    def test_integral_magnitude_at_nyquist(self):
        res = frequency_response(ControllerGains(0.0, 1.0, 0.0), np.pi)
        assert abs(res.i_mag[0] - 0.5) < 1e-12
        assert abs(res.total_mag[0] - 0.5) < 1e-12

    def test_derivative_magnitude_at_nyquist(self):
        res = frequency_response(ControllerGains(0.0, 0.0, 1.0), np.pi)
        assert abs(res.d_mag[0] - 2.0) < 1e-12
        assert abs(res.total_mag[0] - 2.0) < 1e-12

    def test_scaling_by_gains(self):
        res = frequency_response(ControllerGains(0.0, 0.8, 0.4), np.pi)
        assert abs(res.i_mag[0] - 0.4) < 1e-12
        assert abs(res.d_mag[0] - 0.8) < 1e-12

    def test_integral_blows_up_at_low_frequency(self):
        res = frequency_response(ControllerGains(0.0, 1.0, 0.0), 0.01)
        assert abs(res.i_mag[0] - 100.0) / 100.0 < 0.01

    def test_lowpass_highpass_split_on_dense_grid(self):
        grid = np.linspace(0.01, np.pi, 512)
        res = frequency_response(ControllerGains(1.0, 0.8, 0.4), grid)
        assert np.all(np.diff(res.i_mag) < 0.0)
        assert np.all(np.diff(res.d_mag) > 0.0)
        assert np.all(res.p_mag == 1.0)

    def test_rejects_nonpositive_and_out_of_band_frequencies(self):
        gains = ControllerGains(1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            frequency_response(gains, 0.0)
        with pytest.raises(ValueError):
            frequency_response(gains, [-0.1, 0.5])
        with pytest.raises(ValueError):
            frequency_response(gains, 3.2)


class TestTapExpansion:
    def test_three_stride1_layers_frozen_counts(self):
        exp = receptive_field_expansion([3, 3, 3], [1, 1, 1])
        assert exp.offsets.tolist() == [-3, -2, -1, 0, 1, 2, 3]
        assert exp.counts.tolist() == [1, 3, 6, 7, 6, 3, 1]
        assert exp.total_items == 27

    def test_three_stride2_layers_frozen_counts(self):
        exp = receptive_field_expansion([3, 3, 3], [2, 2, 2])
        assert exp.offsets.tolist() == list(range(-7, 8))
        assert exp.counts.tolist() == [1, 1, 2, 1, 3, 2, 3, 1, 3, 2, 3, 1, 2, 1, 1]
        assert exp.total_items == 27

    def test_single_layer(self):
        exp = receptive_field_expansion([3], [1])
        assert exp.offsets.tolist() == [-1, 0, 1]
        assert exp.counts.tolist() == [1, 1, 1]

    @pytest.mark.parametrize(
        "kernels,strides",
        [
            ([3, 3, 3], [1, 1, 1]),
            ([3, 3, 3], [2, 2, 2]),
            ([5, 3], [1, 2]),
            ([3, 5, 3], [2, 1, 2]),
            ([7], [3]),
            ([1, 3, 1], [2, 2, 2]),
        ],
    )
    def test_matches_brute_force_enumeration(self, kernels, strides):
        exp = receptive_field_expansion(kernels, strides)
        oracle = enumerate_taps(kernels, strides)
        assert dict(zip(exp.offsets.tolist(), exp.counts.tolist())) == dict(oracle)

    def test_validation(self):
        with pytest.raises(ValueError):
            receptive_field_expansion([4, 3], [1, 1])
        with pytest.raises(ValueError):
            receptive_field_expansion([3, 3], [1])
        with pytest.raises(ValueError):
            receptive_field_expansion([], [])
        with pytest.raises(ValueError):
            receptive_field_expansion([3], [0])

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_symmetry_and_total_properties(self, data):
        n = data.draw(st.integers(1, 4))
        kernels = data.draw(st.lists(st.sampled_from([1, 3, 5, 7]), min_size=n, max_size=n))
        strides = data.draw(st.lists(st.integers(1, 3), min_size=n, max_size=n))
        exp = receptive_field_expansion(kernels, strides)
        assert exp.total_items == math.prod(kernels)
        assert int(exp.counts.sum()) == exp.total_items
        lookup = dict(zip(exp.offsets.tolist(), exp.counts.tolist()))
        for off, cnt in lookup.items():
            assert lookup[-off] == cnt


class TestLocalityRatio:
    def test_detail_stack_stays_local(self):
        exp = receptive_field_expansion([3, 3, 3], [1, 1, 1])
        ratio = locality_ratio(exp, 1)
        assert ratio == Fraction(19, 27)
        assert float(ratio) > 0.70

    def test_strided_stack_spreads_out(self):
        exp = receptive_field_expansion([3, 3, 3], [2, 2, 2])
        ratio = locality_ratio(exp, 1)
        assert ratio == Fraction(7, 27)
        assert float(ratio) < 0.26

    def test_window_covering_everything_gives_one(self):
        exp = receptive_field_expansion([3, 3, 3], [2, 2, 2])
        assert locality_ratio(exp, 7) == Fraction(1, 1)
        assert locality_ratio(exp, 100) == Fraction(1, 1)

    def test_depth_makes_stride1_stacks_less_local(self):
        ratios = [
            locality_ratio(receptive_field_expansion([3] * d, [1] * d), 1)
            for d in range(1, 6)
        ]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_negative_window_rejected(self):
        exp = receptive_field_expansion([3], [1])
        with pytest.raises(ValueError):
            locality_ratio(exp, -1)
