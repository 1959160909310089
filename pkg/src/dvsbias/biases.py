"""Bias math for the pixel array.

Maps the three dimensionless tweak knobs onto pixel bias currents and the
currents onto the physical operating point: temporal contrast threshold,
photoreceptor bandwidth, and refractory period.  All functions are pure and
stateless.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

logger = logging.getLogger(__name__)

# Sensor-array dimensions the stock constants were characterised on; used by
# the harness to rescale absolute rate bounds to other geometries.
REFERENCE_PIXEL_COUNT = 346 * 260


class ConfigError(ValueError):
    """Camera constants or tweak-range configuration is unusable."""


class CurrentRangeError(ValueError):
    """A current falls outside the tweakable range around its nominal."""


class BiasError(ValueError):
    """Bias currents violate the ordering/positivity the pixel requires."""


def clamp_tweak(value: float) -> float:
    """Clamp a tweak to [-1, 1]; out-of-range inputs are reported, not rejected."""
    if value < -1.0 or value > 1.0:
        logger.warning("tweak %.4g outside [-1, 1]; clamping", value)
        return max(-1.0, min(1.0, value))
    return float(value)


@dataclass(frozen=True)
class TweakRange:
    """Exponential actuation range around a nominal current.

    Tweak -1 divides the nominal by ``t_min``, +1 multiplies it by ``t_max``.
    """

    t_min: float
    t_max: float
    nominal_current: float

    def __post_init__(self):
        if not (self.t_min > 1.0 and self.t_max > 1.0):
            raise ConfigError(
                f"tweak range factors must exceed 1 (got t_min={self.t_min}, "
                f"t_max={self.t_max})"
            )
        if not self.nominal_current > 0.0:
            raise ConfigError(f"nominal current must be positive (got {self.nominal_current})")

    @property
    def current_min(self) -> float:
        return self.nominal_current / self.t_min

    @property
    def current_max(self) -> float:
        return self.nominal_current * self.t_max


@dataclass(frozen=True)
class TweakSet:
    """The three dimensionless knobs; each clamped to [-1, 1] on construction."""

    threshold_tweak: float = 0.0
    bandwidth_tweak: float = 0.0
    refractory_tweak: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "threshold_tweak", clamp_tweak(self.threshold_tweak))
        object.__setattr__(self, "bandwidth_tweak", clamp_tweak(self.bandwidth_tweak))
        object.__setattr__(self, "refractory_tweak", clamp_tweak(self.refractory_tweak))

    def with_value(self, target: str, value: float) -> "TweakSet":
        if target not in ("threshold_tweak", "bandwidth_tweak", "refractory_tweak"):
            raise ValueError(f"unknown tweak target {target!r}")
        return replace(self, **{target: value})


@dataclass(frozen=True)
class BiasCurrents:
    """The six pixel bias currents, amperes, all strictly positive."""

    i_pr: float
    i_sf: float
    i_d: float
    i_on: float
    i_off: float
    i_refr: float

    def __post_init__(self):
        for name in ("i_pr", "i_sf", "i_d", "i_on", "i_off", "i_refr"):
            if not getattr(self, name) > 0.0:
                raise BiasError(f"{name} must be positive (got {getattr(self, name)})")


@dataclass(frozen=True)
class PixelParams:
    """Derived physical operating point of every pixel in the array.

    ``theta_on`` is the log-intensity change (e-folds) per ON event,
    ``theta_off`` its negative counterpart (thresholds are run balanced),
    ``sensitivity`` = 1/theta_on in events per e-fold.
    """

    theta_on: float
    theta_off: float
    sensitivity: float
    bandwidth_hz: float
    refractory_s: float


# Stock DAVIS346-class operating point.
DEFAULT_NOMINAL_CURRENTS = BiasCurrents(
    i_pr=1e-9,
    i_sf=25e-12,
    i_d=20e-9,
    i_on=1.3e-6,
    i_off=300e-12,
    i_refr=5e-9,
)


@dataclass(frozen=True)
class CameraConfig:
    """Camera constants block: threshold gain, refractory charge constants,
    nominal currents, tweak ranges, and the nominal photoreceptor bandwidth."""

    a_theta: float = 1.0 / 15.5
    c3_farads: float = 20e-15
    v_refr_volts: float = 0.5
    nominal: BiasCurrents = DEFAULT_NOMINAL_CURRENTS
    threshold_range: tuple[float, float] = (10.0, 10.0)
    bandwidth_range: tuple[float, float] = (30.0, 30.0)
    refractory_range: tuple[float, float] = (100.0, 8.0)
    nominal_bandwidth_hz: float = 250.0
    bandwidth_exponent: float = 0.5

    def __post_init__(self):
        if self.a_theta <= 0 or self.c3_farads <= 0 or self.v_refr_volts <= 0:
            raise ConfigError("camera constants must be positive")
        if self.nominal_bandwidth_hz <= 0:
            raise ConfigError("nominal bandwidth must be positive")
        for pair in (self.threshold_range, self.bandwidth_range, self.refractory_range):
            if not (pair[0] > 1.0 and pair[1] > 1.0):
                raise ConfigError(f"range factors must exceed 1 (got {pair})")

    # Per-current tweak ranges
    def range_on(self) -> TweakRange:
        return TweakRange(*self.threshold_range, self.nominal.i_on)

    def range_off(self) -> TweakRange:
        return TweakRange(*self.threshold_range, self.nominal.i_off)

    def range_pr(self) -> TweakRange:
        return TweakRange(*self.bandwidth_range, self.nominal.i_pr)

    def range_sf(self) -> TweakRange:
        return TweakRange(*self.bandwidth_range, self.nominal.i_sf)

    def range_refr(self) -> TweakRange:
        return TweakRange(*self.refractory_range, self.nominal.i_refr)

    def to_mapping(self) -> dict[str, float]:
        n = self.nominal
        return {
            "a_theta": self.a_theta,
            "c3_farads": self.c3_farads,
            "v_refr_volts": self.v_refr_volts,
            "i_pr_amps": n.i_pr,
            "i_sf_amps": n.i_sf,
            "i_d_amps": n.i_d,
            "i_on_amps": n.i_on,
            "i_off_amps": n.i_off,
            "i_refr_amps": n.i_refr,
            "threshold_t_min": self.threshold_range[0],
            "threshold_t_max": self.threshold_range[1],
            "bandwidth_t_min": self.bandwidth_range[0],
            "bandwidth_t_max": self.bandwidth_range[1],
            "refractory_t_min": self.refractory_range[0],
            "refractory_t_max": self.refractory_range[1],
            "nominal_bandwidth_hz": self.nominal_bandwidth_hz,
            "bandwidth_exponent": self.bandwidth_exponent,
        }

    @classmethod
    def from_mapping(cls, mapping: dict[str, str | float]) -> "CameraConfig":
        base = cls().to_mapping()
        unknown = set(mapping) - set(base)
        if unknown:
            raise ConfigError(f"unknown camera keys: {sorted(unknown)}")
        vals = dict(base)
        vals.update({k: float(v) for k, v in mapping.items()})
        nominal = BiasCurrents(
            i_pr=vals["i_pr_amps"],
            i_sf=vals["i_sf_amps"],
            i_d=vals["i_d_amps"],
            i_on=vals["i_on_amps"],
            i_off=vals["i_off_amps"],
            i_refr=vals["i_refr_amps"],
        )
        return cls(
            a_theta=vals["a_theta"],
            c3_farads=vals["c3_farads"],
            v_refr_volts=vals["v_refr_volts"],
            nominal=nominal,
            threshold_range=(vals["threshold_t_min"], vals["threshold_t_max"]),
            bandwidth_range=(vals["bandwidth_t_min"], vals["bandwidth_t_max"]),
            refractory_range=(vals["refractory_t_min"], vals["refractory_t_max"]),
            nominal_bandwidth_hz=vals["nominal_bandwidth_hz"],
            bandwidth_exponent=vals["bandwidth_exponent"],
        )


def tweak_to_current(tweak: float, rng: TweakRange) -> float:
    """Exponentially map a tweak in [-1, 1] onto the current range.

    Zero maps to the nominal current; +1 to nominal*t_max; -1 to nominal/t_min.
    Out-of-range tweaks are clamped (and reported via logging).
    """
    t = clamp_tweak(tweak)
    if t >= 0.0:
        return rng.nominal_current * math.exp(t * math.log(rng.t_max))
    return rng.nominal_current * math.exp(t * math.log(rng.t_min))


def current_to_tweak(current: float, rng: TweakRange) -> float:
    """Inverse of :func:`tweak_to_current` (used for telemetry readback)."""
    if not current > 0.0:
        raise CurrentRangeError(f"current must be positive (got {current})")
    lo, hi = rng.current_min, rng.current_max
    if current < lo * (1 - 1e-12) or current > hi * (1 + 1e-12):
        raise CurrentRangeError(
            f"current {current:.4g} A outside tweakable range [{lo:.4g}, {hi:.4g}] A"
        )
    ratio = current / rng.nominal_current
    if ratio >= 1.0:
        tweak = math.log(ratio) / math.log(rng.t_max)
    else:
        tweak = math.log(ratio) / math.log(rng.t_min)
    return max(-1.0, min(1.0, tweak))


def thresholds_from_currents(c: BiasCurrents, a_theta: float = 1.0 / 15.5) -> tuple[float, float]:
    """ON/OFF event thresholds (e-folds of log intensity) from comparator currents.

    Requires i_on > i_d > i_off so that theta_on > 0 > theta_off.
    """
    if not (c.i_on > c.i_d > c.i_off):
        raise BiasError(
            f"comparator currents must satisfy i_on > i_d > i_off "
            f"(got {c.i_on:.4g} / {c.i_d:.4g} / {c.i_off:.4g})"
        )
    theta_on = a_theta * math.log(c.i_on / c.i_d)
    theta_off = a_theta * math.log(c.i_off / c.i_d)
    return theta_on, theta_off


def currents_for_threshold(
    theta: float,
    base: BiasCurrents,
    a_theta: float = 1.0 / 15.5,
    threshold_range: tuple[float, float] | None = None,
    nominal: BiasCurrents | None = None,
) -> BiasCurrents:
    """Comparator currents realising a balanced threshold theta = theta_on = -theta_off.

    If a tweak range is supplied, currents are clamped into the range around the
    nominal operating point and the clamp is reported.
    """
    if not theta > 0.0:
        raise BiasError(f"threshold must be positive (got {theta})")
    i_on = base.i_d * math.exp(theta / a_theta)
    i_off = base.i_d * math.exp(-theta / a_theta)
    if threshold_range is not None:
        ref = nominal if nominal is not None else base
        rng_on = TweakRange(*threshold_range, ref.i_on)
        rng_off = TweakRange(*threshold_range, ref.i_off)
        clamped_on = min(max(i_on, rng_on.current_min), rng_on.current_max)
        clamped_off = min(max(i_off, rng_off.current_min), rng_off.current_max)
        if clamped_on != i_on or clamped_off != i_off:
            logger.warning(
                "threshold %.4g requires currents outside the tweak range; clamping", theta
            )
        i_on, i_off = clamped_on, clamped_off
    return replace(base, i_on=i_on, i_off=i_off)


def refractory_from_current(
    i_refr: float, c3_farads: float = 20e-15, v_refr_volts: float = 0.5
) -> float:
    """Refractory dead time in seconds for a given refractory bias current.

    Inversely proportional to the current: the product refractory * current is
    the constant c3/v_refr.
    """
    if not i_refr > 0.0:
        raise BiasError(f"refractory current must be positive (got {i_refr})")
    return c3_farads / (i_refr * v_refr_volts)


def bandwidth_from_currents(
    c: BiasCurrents,
    nominal: BiasCurrents,
    nominal_bw_hz: float,
    exponent: float = 0.5,
) -> float:
    """Photoreceptor bandwidth from the front-end bias currents.

    Modeled as nominal_bw * min(i_pr/i_pr0, i_sf/i_sf0)**exponent: the slower of
    the two stages dominates, with a softened (square-root by default)
    dependence.  Strictly increasing in each current with the other held fixed
    at or above its nominal ratio, and equal to nominal_bw at the nominal point.
    """
    if nominal_bw_hz <= 0:
        raise ConfigError(f"nominal bandwidth must be positive (got {nominal_bw_hz})")
    ratio = min(c.i_pr / nominal.i_pr, c.i_sf / nominal.i_sf)
    return nominal_bw_hz * ratio**exponent


def predicted_rate_from_sensitivity(
    sigma: float, sigma_min: float, sigma_0: float, r_0: float
) -> float:
    """Event-rate prediction, affine in sensitivity above the scene minimum.

    Returns r_0 * (sigma - sigma_min) / (sigma_0 - sigma_min), floored at zero.
    """
    if not sigma_0 > sigma_min:
        raise ConfigError(
            f"nominal sensitivity must exceed the minimum (got sigma_0={sigma_0}, "
            f"sigma_min={sigma_min})"
        )
    return max(0.0, r_0 * (sigma - sigma_min) / (sigma_0 - sigma_min))


def currents_from_tweaks(tweaks: TweakSet, config: CameraConfig) -> BiasCurrents:
    """Resolve the three tweaks into the full bias-current vector.

    The threshold tweak raises i_on and lowers i_off symmetrically (keeping the
    ON/OFF thresholds balanced); the bandwidth tweak scales i_pr and i_sf
    together; the refractory tweak scales i_refr.
    """
    return BiasCurrents(
        i_pr=tweak_to_current(tweaks.bandwidth_tweak, config.range_pr()),
        i_sf=tweak_to_current(tweaks.bandwidth_tweak, config.range_sf()),
        i_d=config.nominal.i_d,
        i_on=tweak_to_current(tweaks.threshold_tweak, config.range_on()),
        i_off=tweak_to_current(-tweaks.threshold_tweak, config.range_off()),
        i_refr=tweak_to_current(tweaks.refractory_tweak, config.range_refr()),
    )


def params_from_currents(c: BiasCurrents, config: CameraConfig) -> PixelParams:
    """Physical operating point for a bias-current vector.

    Thresholds are run balanced: theta_off is forced to -theta_on (derived from
    i_on), so the small asymmetry of the stock i_off is dropped.
    """
    theta_on, _ = thresholds_from_currents(c, config.a_theta)
    if theta_on <= 0.0:
        raise BiasError("derived threshold is not positive")
    return PixelParams(
        theta_on=theta_on,
        theta_off=-theta_on,
        sensitivity=1.0 / theta_on,
        bandwidth_hz=bandwidth_from_currents(
            c, config.nominal, config.nominal_bandwidth_hz, config.bandwidth_exponent
        ),
        refractory_s=refractory_from_current(c.i_refr, config.c3_farads, config.v_refr_volts),
    )


def params_from_tweaks(tweaks: TweakSet, config: CameraConfig) -> PixelParams:
    return params_from_currents(currents_from_tweaks(tweaks, config), config)
