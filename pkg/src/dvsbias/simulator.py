"""Deterministic per-pixel event simulation.

Each pixel runs two cascaded first-order lowpass stages (shared cutoff equal
to the photoreceptor bandwidth) on log luminance, compares the filtered value
against a memorised reference, and emits an event whenever the difference
crosses the contrast threshold.  After each event the pixel is dead for the
refractory period; changes inside the dead time are discarded and the
reference re-latches to the filtered value at release.  Event timestamps are
interpolated linearly inside a step, so one step may emit several events per
pixel (spaced by refractory + threshold/slew) without step-size artifacts.

Poisson background noise and bias-change transient bursts are superimposed on
the signal stream as independent overlays; every event carries a ground-truth
provenance tag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .biases import PixelParams

POLARITY_ON = 1
POLARITY_OFF = 0

PROV_SIGNAL = 0
PROV_NOISE = 1
PROV_TRANSIENT = 2
PROVENANCE_NAMES = {PROV_SIGNAL: "signal", PROV_NOISE: "noise", PROV_TRANSIENT: "transient"}
PROVENANCE_CODES = {v: k for k, v in PROVENANCE_NAMES.items()}


class SimulationConfigError(ValueError):
    """Simulation step or model configuration is unusable."""


@dataclass
class EventBatch:
    """Column-oriented event record: microsecond timestamps, coordinates,
    polarity (1=ON, 0=OFF), and provenance tag."""

    t_us: np.ndarray  # int64
    x: np.ndarray  # int32
    y: np.ndarray  # int32
    polarity: np.ndarray  # int8
    provenance: np.ndarray  # int8

    def __len__(self) -> int:
        return len(self.t_us)

    @classmethod
    def empty(cls) -> "EventBatch":
        return cls(
            t_us=np.empty(0, np.int64),
            x=np.empty(0, np.int32),
            y=np.empty(0, np.int32),
            polarity=np.empty(0, np.int8),
            provenance=np.empty(0, np.int8),
        )

    @classmethod
    def concatenate(cls, batches: list["EventBatch"]) -> "EventBatch":
        if not batches:
            return cls.empty()
        return cls(
            t_us=np.concatenate([b.t_us for b in batches]),
            x=np.concatenate([b.x for b in batches]),
            y=np.concatenate([b.y for b in batches]),
            polarity=np.concatenate([b.polarity for b in batches]),
            provenance=np.concatenate([b.provenance for b in batches]),
        )

    def sorted(self) -> "EventBatch":
        """Stable deterministic order: time, then y, x, polarity, provenance."""
        order = np.lexsort((self.provenance, self.polarity, self.x, self.y, self.t_us))
        return EventBatch(
            t_us=self.t_us[order],
            x=self.x[order],
            y=self.y[order],
            polarity=self.polarity[order],
            provenance=self.provenance[order],
        )


@dataclass(frozen=True)
class NoiseModel:
    """Background-activity noise and bias-change transient-burst model.

    The per-pixel noise rate is
    ``base_rate * (B/B0)**alpha * (theta0/theta)**beta * (L0/L)**delta``:
    strictly increasing in bandwidth, strictly decreasing in threshold, and
    non-increasing in luminance.  ``burst_events_per_pixel`` scales the
    transient burst emitted when biases change; the burst decays exponentially
    with time constant ``burst_decay_s`` (truncated at five time constants).
    """

    base_rate_hz: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    delta: float = 1.0
    on_fraction: float = 0.5
    reference_luminance: float = 100.0
    burst_events_per_pixel: float = 0.5
    burst_decay_s: float = 0.3

    def __post_init__(self):
        if self.base_rate_hz < 0:
            raise SimulationConfigError("noise base rate must be >= 0")
        if self.alpha <= 0 or self.beta <= 0 or self.delta < 0:
            raise SimulationConfigError("noise exponents must satisfy alpha,beta>0, delta>=0")
        if not (0.0 <= self.on_fraction <= 1.0):
            raise SimulationConfigError("on_fraction must lie in [0, 1]")
        if self.burst_events_per_pixel < 0 or self.burst_decay_s <= 0:
            raise SimulationConfigError("burst parameters must be positive")

    def rate_map(
        self, params: PixelParams, nominal: PixelParams, luminance: np.ndarray
    ) -> np.ndarray:
        """Per-pixel noise rate (Hz) for the current operating point and field."""
        if self.base_rate_hz == 0.0:
            return np.zeros_like(luminance)
        factor = self.base_rate_hz
        if math.isfinite(params.bandwidth_hz) and math.isfinite(nominal.bandwidth_hz):
            factor *= (params.bandwidth_hz / nominal.bandwidth_hz) ** self.alpha
        factor *= (nominal.theta_on / params.theta_on) ** self.beta
        if self.delta == 0.0:
            return np.full_like(luminance, factor)
        return factor * (self.reference_luminance / luminance) ** self.delta


@dataclass(frozen=True)
class BurstSpec:
    """Transient burst scheduled by a bias change."""

    n_events: int
    change_magnitude: float  # summed |delta log parameter|
    t0: float
    decay_s: float


def _log_ratio(new: float, old: float) -> float:
    if not (math.isfinite(new) and math.isfinite(old)) or new <= 0 or old <= 0:
        return 0.0
    return abs(math.log(new / old))


class PixelArray:
    """Stateful pixel-array simulator; one owner drives it step by step.

    The first step initialises the filter states and references to the first
    field (no spurious start-up events).  All randomness comes from the seeded
    generator, so identical (field timeline, params timeline, seed) inputs
    reproduce the event stream bit exactly.
    """

    def __init__(
        self,
        width: int,
        height: int,
        params: PixelParams,
        noise: NoiseModel | None = None,
        nominal_params: PixelParams | None = None,
        seed: int = 0,
    ):
        if width <= 0 or height <= 0:
            raise SimulationConfigError("geometry must be positive")
        self.width = width
        self.height = height
        self.n_pixels = width * height
        self.params = params
        self.noise = noise if noise is not None else NoiseModel(base_rate_hz=0.0)
        self.nominal_params = nominal_params if nominal_params is not None else params
        self.rng = np.random.default_rng(seed)
        self.time = 0.0
        shape = (height, width)
        self._lp1 = np.zeros(shape)
        self._lp2 = np.zeros(shape)
        self._mem = np.zeros(shape)
        self._refr_until = np.full(shape, -np.inf)
        self._initialized = False
        # pending transient-burst events, each array time-sorted
        self._pending_t: np.ndarray = np.empty(0, np.float64)
        self._pending_px: np.ndarray = np.empty(0, np.int64)
        self._pending_pol: np.ndarray = np.empty(0, np.int8)

    # -- bias actuation -----------------------------------------------------

    def apply_biases(self, new_params: PixelParams, change_time: float) -> BurstSpec:
        """Switch the operating point and schedule the transient burst.

        Burst size is burst_events_per_pixel * n_pixels * sum of absolute log
        changes of threshold, bandwidth, and refractory period; events fall
        uniformly over pixels with exponentially decaying timestamps inside
        [change_time, change_time + 5*decay].
        """
        old = self.params
        mag = (
            _log_ratio(new_params.theta_on, old.theta_on)
            + _log_ratio(new_params.bandwidth_hz, old.bandwidth_hz)
            + _log_ratio(new_params.refractory_s, old.refractory_s)
        )
        self.params = new_params
        n = int(round(self.noise.burst_events_per_pixel * self.n_pixels * mag))
        spec = BurstSpec(
            n_events=n, change_magnitude=mag, t0=change_time, decay_s=self.noise.burst_decay_s
        )
        if n == 0:
            return spec
        tau = self.noise.burst_decay_s
        # inverse-CDF sample of an exponential truncated at 5 tau
        u = self.rng.random(n)
        offsets = -tau * np.log1p(-u * (1.0 - math.exp(-5.0)))
        t = change_time + offsets
        px = self.rng.integers(0, self.n_pixels, size=n)
        pol = (self.rng.random(n) < self.noise.on_fraction).astype(np.int8)
        t_all = np.concatenate([self._pending_t, t])
        px_all = np.concatenate([self._pending_px, px])
        pol_all = np.concatenate([self._pending_pol, pol])
        order = np.argsort(t_all, kind="stable")
        self._pending_t = t_all[order]
        self._pending_px = px_all[order]
        self._pending_pol = pol_all[order]
        return spec

    # -- stepping -----------------------------------------------------------

    def step(self, samples: np.ndarray, dt: float) -> EventBatch:
        """Advance the array by dt against a linear-luminance field.

        Requires dt <= 1/(4*bandwidth) so the filter is resolved (no silent
        aliasing); unlimited-bandwidth operation (bandwidth=inf) bypasses the
        filter and the step-size check.
        """
        if samples.shape != (self.height, self.width):
            raise SimulationConfigError(
                f"field shape {samples.shape} does not match array "
                f"{self.height}x{self.width}"
            )
        if dt <= 0:
            raise SimulationConfigError("dt must be positive")
        bw = self.params.bandwidth_hz
        if math.isfinite(bw) and dt > 1.0 / (4.0 * bw):
            raise SimulationConfigError(
                f"dt={dt:.3g}s too large for bandwidth {bw:.3g}Hz "
                f"(needs dt <= {1.0 / (4.0 * bw):.3g}s)"
            )
        t0 = self.time
        t1 = t0 + dt
        x = np.log(samples)
        if not self._initialized:
            self._lp1[:] = x
            self._lp2[:] = x
            self._mem[:] = x
            self._initialized = True
            signal = EventBatch.empty()
        else:
            signal = self._step_signal(x, t0, dt)
        noise = self._sample_noise(samples, t0, dt)
        burst = self._drain_pending(t1)
        self.time = t1
        merged = EventBatch.concatenate([signal, noise, burst])
        return merged.sorted()

    def _step_signal(self, x: np.ndarray, t0: float, dt: float) -> EventBatch:
        theta = self.params.theta_on
        delta_refr = self.params.refractory_s
        bw = self.params.bandwidth_hz
        if math.isinf(bw):
            lp2_old = self._lp2.copy()
            self._lp1[:] = x
            self._lp2[:] = x
        else:
            a = -math.expm1(-2.0 * math.pi * bw * dt)
            lp2_old = self._lp2.copy()
            self._lp1 += a * (x - self._lp1)
            self._lp2 += a * (self._lp1 - self._lp2)
        move = self._lp2 - lp2_old  # displacement over the step

        refr = self._refr_until
        free = refr <= t0
        released = (~free) & (refr <= t0 + dt)
        with np.errstate(divide="ignore", invalid="ignore"):
            # first-crossing time offsets, NaN/inf where no crossing occurs
            diff_end = lp2_old + move - self._mem
            slope = move / dt
            tau_free = np.where(slope > 0, theta - (lp2_old - self._mem), -theta - (lp2_old - self._mem)) / slope
            rel_off = refr - t0
            tau_rel = rel_off + theta / np.abs(slope)
        crossing_free = free & ((move > 0) & (diff_end >= theta) | (move < 0) & (diff_end <= -theta))
        crossing_rel = released & (np.abs(move) > 0) & (tau_rel <= dt)

        # re-latch released pixels that emit nothing this step
        relatch = released & ~crossing_rel
        if np.any(relatch):
            self._mem[relatch] = lp2_old[relatch] + slope[relatch] * rel_off[relatch]

        mask = crossing_free | crossing_rel
        if not np.any(mask):
            return EventBatch.empty()

        idx = np.nonzero(mask.ravel())[0]
        flat_tau_free = tau_free.ravel()[idx]
        flat_tau_rel = tau_rel.ravel()[idx]
        first = np.where(crossing_free.ravel()[idx], flat_tau_free, flat_tau_rel)
        first = np.clip(first, 0.0, dt)
        s = slope.ravel()[idx]
        cycle = delta_refr + theta / np.abs(s)
        # small relative slack so exact-multiple crossings are not lost to roundoff
        counts = (np.floor((dt - first) / cycle * (1.0 + 1e-12)) + 1.0).astype(np.int64)
        total = int(counts.sum())

        rep = np.repeat(np.arange(len(idx)), counts)
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        k = np.arange(total) - np.repeat(starts, counts)
        te = t0 + first[rep] + k * cycle[rep]
        pol = np.where(s[rep] > 0, POLARITY_ON, POLARITY_OFF).astype(np.int8)

        # advance refractory clocks and re-latch references released in-step
        last = first + (counts - 1) * cycle
        self._refr_until.ravel()[idx] = t0 + last + delta_refr
        release = last + delta_refr
        inside = release <= dt
        if np.any(inside):
            ii = idx[inside]
            self._mem.ravel()[ii] = lp2_old.ravel()[ii] + s[inside] * release[inside]

        px = idx[rep]
        return EventBatch(
            t_us=np.floor(te * 1e6 + 0.5).astype(np.int64),
            x=(px % self.width).astype(np.int32),
            y=(px // self.width).astype(np.int32),
            polarity=pol,
            provenance=np.full(total, PROV_SIGNAL, np.int8),
        )

    def _sample_noise(self, samples: np.ndarray, t0: float, dt: float) -> EventBatch:
        if self.noise.base_rate_hz == 0.0:
            return EventBatch.empty()
        rates = self.noise.rate_map(self.params, self.nominal_params, samples).ravel()
        total_rate = float(rates.sum())
        count = int(self.rng.poisson(total_rate * dt))
        if count == 0:
            return EventBatch.empty()
        cdf = np.cumsum(rates)
        px = np.searchsorted(cdf, self.rng.random(count) * cdf[-1])
        px = np.minimum(px, self.n_pixels - 1)
        te = t0 + self.rng.random(count) * dt
        pol = (self.rng.random(count) < self.noise.on_fraction).astype(np.int8)
        return EventBatch(
            t_us=np.floor(te * 1e6 + 0.5).astype(np.int64),
            x=(px % self.width).astype(np.int32),
            y=(px // self.width).astype(np.int32),
            polarity=pol,
            provenance=np.full(count, PROV_NOISE, np.int8),
        )

    def _drain_pending(self, t1: float) -> EventBatch:
        if len(self._pending_t) == 0 or self._pending_t[0] > t1:
            return EventBatch.empty()
        n = int(np.searchsorted(self._pending_t, t1, side="right"))
        te = self._pending_t[:n]
        px = self._pending_px[:n]
        pol = self._pending_pol[:n]
        self._pending_t = self._pending_t[n:]
        self._pending_px = self._pending_px[n:]
        self._pending_pol = self._pending_pol[n:]
        return EventBatch(
            t_us=np.floor(te * 1e6 + 0.5).astype(np.int64),
            x=(px % self.width).astype(np.int32),
            y=(px // self.width).astype(np.int32),
            polarity=pol.astype(np.int8),
            provenance=np.full(n, PROV_TRANSIENT, np.int8),
        )


def rate_oracle_eq8(
    bin_edges_s: np.ndarray,
    density_per_s: np.ndarray,
    delta_refr_s: float,
    n_pixels: int,
) -> float:
    """Independent array-rate oracle from the inter-event-interval histogram.

    Integrates n_pixels * sum_i f_i * ln((b_i + d)/(a_i + d)) where f is the
    piecewise-constant interval density and d the refractory period; this is
    the exact integral of f(T)/(T + d) over each bin.  Used to cross-check the
    simulator's refractory-limited rates without touching its code path.
    """
    edges = np.asarray(bin_edges_s, dtype=np.float64)
    dens = np.asarray(density_per_s, dtype=np.float64)
    if edges.ndim != 1 or len(edges) != len(dens) + 1:
        raise ValueError("need len(bin_edges) == len(density) + 1")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    if delta_refr_s < 0:
        raise ValueError("refractory period must be >= 0")
    if edges[0] < 0 or (edges[0] == 0 and delta_refr_s == 0):
        raise ValueError("intervals must be positive (first edge > 0 when refractory is 0)")
    widths = np.diff(edges)
    norm = float(np.sum(dens * widths))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"interval histogram is not normalized (integral={norm:.6g})")
    terms = dens * np.log((edges[1:] + delta_refr_s) / (edges[:-1] + delta_refr_s))
    return float(n_pixels * np.sum(terms))
