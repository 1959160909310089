import math

import numpy as np
import pytest

from dvsbias.biases import PixelParams
from dvsbias.simulator import (
    EventBatch,
    NoiseModel,
    PixelArray,
    PROV_NOISE,
    PROV_SIGNAL,
    PROV_TRANSIENT,
    SimulationConfigError,
    rate_oracle_eq8,
)
from dvsbias.stimulus import Directive, ScenarioSchedule, render


def make_params(theta=0.25, bandwidth=math.inf, refractory=0.0):
    return PixelParams(
        theta_on=theta,
        theta_off=-theta,
        sensitivity=1.0 / theta,
        bandwidth_hz=bandwidth,
        refractory_s=refractory,
    )


def triangle_drive_rate(r0_hz, delta_refr_s, duration_s=10.0, dt=1e-4, theta=0.25):
    """Single pixel under a triangle log-luminance wave whose slopes produce an
    instantaneous event rate r0; returns the measured event rate."""
    params = make_params(theta=theta, refractory=delta_refr_s)
    sim = PixelArray(1, 1, params, NoiseModel(base_rate_hz=0.0), seed=0)
    slope = r0_hz * theta  # e-folds per second
    # long legs keep the reversal losses well under the 2% budget
    steps_per_leg = max(1, int(round(50.0 / (slope * dt))))
    amplitude = steps_per_leg * dt * slope
    n_steps = int(round(duration_s / dt))
    count = 0
    sim.step(np.ones((1, 1)), dt)  # initialisation step (no events)
    phase = 0.0
    level = 0.0
    direction = 1.0
    for k in range(n_steps):
        level += direction * slope * dt
        phase += 1
        if phase >= steps_per_leg:
            phase = 0
            direction = -direction
        field = np.array([[math.exp(level - amplitude / 2)]])
        count += len(sim.step(field, dt))
    return count / duration_s


class TestStepBasics:
    def test_static_field_no_noise_no_events(self):
        sim = PixelArray(8, 8, make_params(bandwidth=100.0), NoiseModel(base_rate_hz=0.0))
        field = np.full((8, 8), 50.0)
        total = sum(len(sim.step(field, 1e-3)) for _ in range(200))
        assert total == 0

    def test_exact_three_theta_step_gives_three_on_events(self):
        theta = 0.25
        sim = PixelArray(1, 1, make_params(theta=theta), NoiseModel(base_rate_hz=0.0))
        sim.step(np.array([[1.0]]), 1e-3)
        batch = sim.step(np.array([[math.exp(3 * theta)]]), 1e-3)
        assert len(batch) == 3
        assert np.all(batch.polarity == 1)
        assert np.all(batch.provenance == PROV_SIGNAL)

    def test_off_polarity_for_darkening(self):
        theta = 0.25
        sim = PixelArray(1, 1, make_params(theta=theta), NoiseModel(base_rate_hz=0.0))
        sim.step(np.array([[1.0]]), 1e-3)
        batch = sim.step(np.array([[math.exp(-2 * theta)]]), 1e-3)
        assert len(batch) == 2
        assert np.all(batch.polarity == 0)

    def test_sub_threshold_change_silent(self):
        theta = 0.25
        sim = PixelArray(1, 1, make_params(theta=theta), NoiseModel(base_rate_hz=0.0))
        sim.step(np.array([[1.0]]), 1e-3)
        batch = sim.step(np.array([[math.exp(0.9 * theta)]]), 1e-3)
        assert len(batch) == 0

    def test_timestamps_interpolated_within_step(self):
        theta = 0.25
        sim = PixelArray(1, 1, make_params(theta=theta), NoiseModel(base_rate_hz=0.0))
        sim.step(np.array([[1.0]]), 1e-3)
        batch = sim.step(np.array([[math.exp(2 * theta)]]), 1e-3)
        # ramp of 2 theta over (1ms, 2ms]: crossings at 1.5ms and 2.0ms
        assert batch.t_us.tolist() == [1500, 2000]

    def test_dt_too_large_for_bandwidth_rejected(self):
        sim = PixelArray(2, 2, make_params(bandwidth=100.0), NoiseModel(base_rate_hz=0.0))
        with pytest.raises(SimulationConfigError, match="too large"):
            sim.step(np.ones((2, 2)), 0.01)

    def test_geometry_mismatch_rejected(self):
        sim = PixelArray(2, 2, make_params(), NoiseModel(base_rate_hz=0.0))
        with pytest.raises(SimulationConfigError, match="shape"):
            sim.step(np.ones((3, 2)), 1e-3)

    def test_lowpass_delays_threshold_crossing(self):
        # with a finite bandwidth a step input crosses threshold later than
        # with the filter bypassed
        theta = 0.25
        fast = PixelArray(1, 1, make_params(theta=theta), NoiseModel(base_rate_hz=0.0))
        slow = PixelArray(1, 1, make_params(theta=theta, bandwidth=50.0), NoiseModel(0.0))
        for sim in (fast, slow):
            sim.step(np.array([[1.0]]), 1e-3)
        target = np.array([[math.exp(1.5 * theta)]])
        t_fast = t_slow = None
        for k in range(400):
            bf = fast.step(target, 1e-3)
            bs = slow.step(target, 1e-3)
            if len(bf) and t_fast is None:
                t_fast = bf.t_us[0]
            if len(bs) and t_slow is None:
                t_slow = bs.t_us[0]
        assert t_fast is not None and t_slow is not None
        assert t_slow > t_fast


class TestRefractory:
    @pytest.mark.parametrize("r0_khz", [1, 5, 10])
    @pytest.mark.parametrize("delta_us", [0, 50, 200])
    def test_rate_matches_closed_form(self, r0_khz, delta_us):
        r0 = r0_khz * 1e3
        delta = delta_us * 1e-6
        measured = triangle_drive_rate(r0, delta, duration_s=4.0)
        expected = 1.0 / (1.0 / r0 + delta)
        assert measured == pytest.approx(expected, rel=0.02)

    def test_rate_matches_interval_histogram_oracle(self):
        r0, delta = 10e3, 50e-6
        t_interval = 1.0 / r0
        edges = np.array([t_interval * (1 - 1e-9), t_interval * (1 + 1e-9)])
        dens = np.array([1.0 / (edges[1] - edges[0])])
        oracle = rate_oracle_eq8(edges, dens, delta, n_pixels=1)
        measured = triangle_drive_rate(r0, delta, duration_s=4.0)
        assert measured == pytest.approx(oracle, rel=0.02)

    def test_inter_event_gap_never_below_refractory(self):
        delta = 120e-6
        params = make_params(theta=0.2, refractory=delta)
        sim = PixelArray(1, 1, params, NoiseModel(base_rate_hz=0.0))
        sim.step(np.ones((1, 1)), 1e-3)
        ts = []
        level = 0.0
        for k in range(300):
            level += 0.45  # fast ramp, multiple events per step
            ts.extend(sim.step(np.array([[math.exp(level - 60)]]), 1e-3).t_us.tolist())
        gaps = np.diff(ts)
        assert len(ts) > 50
        assert gaps.min() >= math.floor(delta * 1e6)

    def test_event_count_nonincreasing_in_refractory(self):
        schedule = ScenarioSchedule(
            directives=[
                Directive(t=0.0, dot_count=2, dot_speed_hz=6.0, dot_contrast=(0.8,))
            ]
        )
        counts = []
        for delta in (0.0, 100e-6, 400e-6, 1600e-6):
            sim = PixelArray(
                24, 24, make_params(theta=0.25, bandwidth=250.0, refractory=delta),
                NoiseModel(base_rate_hz=0.0), seed=3,
            )
            dt = 1e-3
            total = 0
            for k in range(1200):
                f = render(schedule, (k + 1) * dt, 24, 24)
                total += len(sim.step(f.samples, dt))
            counts.append(total)
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts[0] > counts[-1]  # the long refractory genuinely bites


class TestThresholdEffect:
    def test_event_count_nonincreasing_in_theta(self):
        schedule = ScenarioSchedule(
            directives=[
                Directive(t=0.0, dot_count=2, dot_speed_hz=4.0, dot_contrast=(0.5,))
            ]
        )
        counts = []
        for theta in (0.12, 0.2693, 0.33, 0.42, 0.55):
            sim = PixelArray(
                24, 24, make_params(theta=theta, bandwidth=250.0),
                NoiseModel(base_rate_hz=0.0), seed=5,
            )
            dt = 1e-3
            total = 0
            for k in range(1000):
                f = render(schedule, (k + 1) * dt, 24, 24)
                total += len(sim.step(f.samples, dt))
            counts.append(total)
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts[0] > counts[-1]


class TestNoise:
    def run_noise(self, bandwidth=250.0, luminance=100.0, seed=7, steps=2000):
        params = make_params(theta=0.25, bandwidth=bandwidth)
        nominal = make_params(theta=0.25, bandwidth=250.0)
        sim = PixelArray(
            16, 16, params,
            NoiseModel(base_rate_hz=2.0, reference_luminance=100.0),
            nominal_params=nominal, seed=seed,
        )
        field = np.full((16, 16), luminance)
        total = 0
        for _ in range(steps):
            total += len(sim.step(field, 1e-3))
        return total

    def test_noise_count_increases_with_bandwidth(self):
        low = self.run_noise(bandwidth=100.0)
        high = self.run_noise(bandwidth=250.0)
        assert high > low

    def test_noise_count_decreases_with_luminance(self):
        dark = self.run_noise(luminance=10.0)
        bright = self.run_noise(luminance=100.0)
        assert dark > bright

    def test_noise_rate_statistics(self):
        # 2 Hz/pixel * 256 pixels * 2 s = 1024 expected events
        total = self.run_noise(steps=2000)
        assert total == pytest.approx(1024, rel=0.15)

    def test_noise_events_tagged_and_polarity_split(self):
        params = make_params(theta=0.25, bandwidth=250.0)
        sim = PixelArray(
            16, 16, params, NoiseModel(base_rate_hz=5.0, on_fraction=0.5), seed=11
        )
        field = np.full((16, 16), 100.0)
        batches = [sim.step(field, 1e-3) for _ in range(1500)]
        batch = EventBatch.concatenate(batches)
        assert np.all(batch.provenance == PROV_NOISE)
        on_frac = batch.polarity.mean()
        assert on_frac == pytest.approx(0.5, abs=0.05)

    def test_rate_map_formula(self):
        nm = NoiseModel(base_rate_hz=1.0, alpha=1.0, beta=1.0, delta=1.0,
                        reference_luminance=100.0)
        params = make_params(theta=0.5, bandwidth=500.0)
        nominal = make_params(theta=0.25, bandwidth=250.0)
        lum = np.array([[50.0]])
        # (500/250)^1 * (0.25/0.5)^1 * (100/50)^1 = 2 * 0.5 * 2 = 2
        assert nm.rate_map(params, nominal, lum)[0, 0] == pytest.approx(2.0, rel=1e-12)


class TestTransients:
    def test_zero_change_zero_burst(self):
        params = make_params(bandwidth=250.0)
        sim = PixelArray(16, 16, params, NoiseModel(base_rate_hz=0.0))
        spec = sim.apply_biases(params, change_time=1.0)
        assert spec.n_events == 0

    def test_burst_scales_with_change_magnitude(self):
        params = make_params(bandwidth=250.0)
        small = PixelArray(16, 16, params, NoiseModel(base_rate_hz=0.0)).apply_biases(
            make_params(bandwidth=250.0 * 1.1), 1.0
        )
        large = PixelArray(16, 16, params, NoiseModel(base_rate_hz=0.0)).apply_biases(
            make_params(bandwidth=250.0 * 2.0), 1.0
        )
        assert 0 < small.n_events < large.n_events

    def test_burst_timestamps_within_five_decay_constants(self):
        params = make_params(bandwidth=250.0)
        nm = NoiseModel(base_rate_hz=0.0, burst_events_per_pixel=5.0, burst_decay_s=0.2)
        sim = PixelArray(32, 32, params, nm, seed=2)
        field = np.full((32, 32), 100.0)
        sim.step(field, 1e-3)
        t_change = sim.time
        spec = sim.apply_biases(make_params(bandwidth=125.0), t_change)
        assert spec.n_events > 500
        collected = []
        for _ in range(3000):
            b = sim.step(field, 1e-3)
            collected.append(b)
        batch = EventBatch.concatenate(collected)
        trans = batch.t_us[batch.provenance == PROV_TRANSIENT] * 1e-6
        assert len(trans) == spec.n_events
        assert trans.min() >= t_change - 1e-9
        assert trans.max() <= t_change + 5 * nm.burst_decay_s + 1e-9
        # truncated-exponential oracle: mean offset = tau*(1 - 5 e^-5/(1-e^-5))
        tau = nm.burst_decay_s
        expected_mean = tau * (1 - 5 * math.exp(-5) / (1 - math.exp(-5)))
        assert (trans - t_change).mean() == pytest.approx(expected_mean, rel=0.12)

    def test_burst_events_spread_over_pixels(self):
        params = make_params(bandwidth=250.0)
        nm = NoiseModel(base_rate_hz=0.0, burst_events_per_pixel=10.0)
        sim = PixelArray(8, 8, params, nm, seed=4)
        sim.step(np.full((8, 8), 1.0), 1e-3)
        sim.apply_biases(make_params(bandwidth=100.0), sim.time)
        batch = EventBatch.concatenate([sim.step(np.full((8, 8), 1.0), 1e-3) for _ in range(2500)])
        pix = set(zip(batch.x.tolist(), batch.y.tolist()))
        assert len(pix) > 40  # most of the 64 pixels hit


class TestStreamInvariants:
    def make_busy_sim(self, seed):
        schedule = ScenarioSchedule(
            directives=[
                Directive(t=0.0, dot_count=3, dot_speed_hz=5.0, dot_contrast=(0.6, 0.3))
            ]
        )
        params = make_params(theta=0.2, bandwidth=250.0, refractory=100e-6)
        sim = PixelArray(24, 24, params, NoiseModel(base_rate_hz=1.0), seed=seed)
        return sim, schedule

    def collect(self, seed, steps=800):
        sim, schedule = self.make_busy_sim(seed)
        dt = 1e-3
        out = []
        for k in range(steps):
            f = render(schedule, (k + 1) * dt, 24, 24)
            out.append(sim.step(f.samples, dt))
            if k == 400:
                sim.apply_biases(
                    make_params(theta=0.25, bandwidth=200.0, refractory=150e-6),
                    sim.time,
                )
        return EventBatch.concatenate(out)

    def test_deterministic_for_fixed_seed(self):
        a = self.collect(seed=42)
        b = self.collect(seed=42)
        for field in ("t_us", "x", "y", "polarity", "provenance"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))

    def test_different_seed_changes_noise(self):
        a = self.collect(seed=42)
        b = self.collect(seed=43)
        assert len(a) != len(b) or not np.array_equal(a.t_us, b.t_us)

    def test_timestamps_nondecreasing(self):
        batch = self.collect(seed=1)
        assert np.all(np.diff(batch.t_us) >= 0)

    def test_coordinates_in_bounds(self):
        batch = self.collect(seed=1)
        assert batch.x.min() >= 0 and batch.x.max() < 24
        assert batch.y.min() >= 0 and batch.y.max() < 24

    def test_per_pixel_refractory_gap_for_signal(self):
        batch = self.collect(seed=9)
        sig = batch.provenance == PROV_SIGNAL
        t = batch.t_us[sig]
        px = batch.y[sig].astype(np.int64) * 24 + batch.x[sig]
        # refractory changed mid-run from 100us to 150us; enforce the smaller
        min_gap = math.floor(100e-6 * 1e6)
        for p in np.unique(px):
            gaps = np.diff(np.sort(t[px == p]))
            if len(gaps):
                assert gaps.min() >= min_gap

    def test_provenance_conservation(self):
        batch = self.collect(seed=9)
        n = len(batch)
        counts = sum(
            int(np.count_nonzero(batch.provenance == code))
            for code in (PROV_SIGNAL, PROV_NOISE, PROV_TRANSIENT)
        )
        assert counts == n


class TestRateOracle:
    def test_zero_refractory_reduces_to_mean_inverse_interval(self):
        edges = np.array([1e-3, 2e-3, 4e-3])
        dens = np.array([400.0, 100.0])  # integrates to 0.4 + 0.2... needs 1.0
        dens = dens / np.sum(dens * np.diff(edges))
        got = rate_oracle_eq8(edges, dens, 0.0, n_pixels=10)
        # exact piecewise integral of 1/T
        f1, f2 = dens
        expected = 10 * (f1 * math.log(2e-3 / 1e-3) + f2 * math.log(4e-3 / 2e-3))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_delta_distribution_point(self):
        t0 = 100e-6
        edges = np.array([t0 * (1 - 1e-9), t0 * (1 + 1e-9)])
        dens = np.array([1.0 / (edges[1] - edges[0])])
        got = rate_oracle_eq8(edges, dens, 100e-6, n_pixels=1)
        assert got == pytest.approx(5000.0, rel=1e-6)

    def test_monotone_decreasing_in_refractory(self):
        edges = np.linspace(1e-4, 1e-2, 50)
        dens = np.ones(49)
        dens = dens / np.sum(dens * np.diff(edges))
        rates = [rate_oracle_eq8(edges, dens, d, 100) for d in (0, 1e-4, 1e-3, 1e-2)]
        assert all(a > b for a, b in zip(rates, rates[1:]))

    def test_unnormalized_histogram_rejected(self):
        edges = np.array([1e-3, 2e-3])
        with pytest.raises(ValueError, match="normalized"):
            rate_oracle_eq8(edges, np.array([5.0]), 0.0, 1)

    def test_bad_edges_rejected(self):
        with pytest.raises(ValueError):
            rate_oracle_eq8(np.array([2e-3, 1e-3]), np.array([1000.0]), 0.0, 1)
        with pytest.raises(ValueError):
            rate_oracle_eq8(np.array([0.0, 1e-3]), np.array([1000.0]), 0.0, 1)
