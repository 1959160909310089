"""Fixed-step hysteresis controllers and the supervisor that paces them.

Three controllers share one pattern: step a tweak by a fixed increment while a
measured rate is beyond a bound, and hold or recover once the rate crosses the
bound scaled by the hysteresis factor.  Entry uses strict crossing of the
bound; exit uses strict crossing of the hysteresis-scaled bound.  Actions are
paced at least ``t_bb`` apart and every action blanks all measurements for
``t_ignore`` (bias changes flood the stream with transients).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .biases import TweakSet
from .metering import RateSample

logger = logging.getLogger(__name__)

CONTROLLER_NAMES = ("threshold", "refractory", "noise")

_TARGETS = {
    "threshold": "threshold_tweak",
    "refractory": "refractory_tweak",
    "noise": "bandwidth_tweak",
}


class Mode(Enum):
    IDLE = "IDLE"
    DRIVING_UP = "DRIVING_UP"
    DRIVING_DOWN = "DRIVING_DOWN"


@dataclass(frozen=True)
class ControllerConfig:
    """Shared fixed-step control constants."""

    delta_bb: float = 0.1
    hysteresis: float = 1.5
    t_ignore_s: float = 1.0
    t_bb_s: float = 2.0
    r_high_hz: float = 300e3
    r_low_hz: float = 100e3
    r_noise_limit_hz: float = 0.5  # per pixel

    def __post_init__(self):
        if not self.r_high_hz > self.r_low_hz > 0:
            raise ValueError("need r_high > r_low > 0")
        if not self.hysteresis > 1:
            raise ValueError("hysteresis factor must exceed 1")
        if not self.delta_bb > 0:
            raise ValueError("delta_bb must be positive")
        if not self.t_bb_s > 0:
            raise ValueError("t_bb must be positive")
        if self.r_noise_limit_hz <= 0:
            raise ValueError("r_noise_limit must be positive")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str | float]) -> "ControllerConfig":
        fields = {
            "delta_bb",
            "hysteresis",
            "t_ignore_s",
            "t_bb_s",
            "r_high_hz",
            "r_low_hz",
            "r_noise_limit_hz",
        }
        unknown = set(mapping) - fields
        if unknown:
            raise ValueError(f"unknown control keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in mapping.items()})


@dataclass
class ControllerState:
    """Per-controller hysteresis state machine plus its action/blanking clocks."""

    mode: Mode = Mode.IDLE
    last_action_t: float = float("-inf")
    blanked_until: float = float("-inf")


@dataclass(frozen=True)
class ControlAction:
    """One fixed-size tweak step issued by a controller."""

    t: float
    target: str
    delta: float
    resulting_tweak: float
    trigger_rate: float


def _snap(x: float) -> float:
    # keeps repeated +-delta_bb walks on an exact grid (0.1 is not a binary float)
    return round(x, 9)


def _step_tweak(current: float, delta: float, stop_at_zero: bool = False) -> float:
    new = _snap(current + delta)
    if stop_at_zero:
        new = min(new, 0.0) if delta > 0 else max(new, 0.0)
    return max(-1.0, min(1.0, new))


def threshold_controller_step(
    sample: RateSample,
    state: ControllerState,
    cfg: ControllerConfig,
    now: float,
    current_tweak: float,
) -> ControlAction | None:
    """Rate bounding: raise the threshold while the rate exceeds the upper
    bound, lower it while the rate is under the lower bound, with hysteresis
    exits at bound/H and bound*H respectively."""
    if sample.t < state.blanked_until:
        return None
    r = sample.r_input_hz
    if r is None:
        return None
    if state.mode is Mode.IDLE:
        if r > cfg.r_high_hz:
            state.mode = Mode.DRIVING_UP
        elif r < cfg.r_low_hz:
            state.mode = Mode.DRIVING_DOWN
    elif state.mode is Mode.DRIVING_UP:
        if r < cfg.r_high_hz / cfg.hysteresis:
            state.mode = Mode.IDLE
    elif state.mode is Mode.DRIVING_DOWN:
        if r > cfg.r_low_hz * cfg.hysteresis:
            state.mode = Mode.IDLE
    if state.mode is Mode.IDLE:
        return None
    if now - state.last_action_t < cfg.t_bb_s:
        return None
    delta = cfg.delta_bb if state.mode is Mode.DRIVING_UP else -cfg.delta_bb
    new = _step_tweak(current_tweak, delta)
    if new == current_tweak:
        return None  # saturated at +-1
    state.last_action_t = now
    return ControlAction(
        t=now,
        target="threshold_tweak",
        delta=_snap(new - current_tweak),
        resulting_tweak=new,
        trigger_rate=r,
    )


def refractory_controller_step(
    sample: RateSample,
    state: ControllerState,
    cfg: ControllerConfig,
    now: float,
    current_tweak: float,
) -> ControlAction | None:
    """Rate limiting: lengthen the refractory period (tweak down) while the
    rate exceeds the upper bound; once the rate drops below bound/H, step the
    tweak back toward its default 0 and stop there.  No lower-bound behaviour.
    """
    if sample.t < state.blanked_until:
        return None
    r = sample.r_input_hz
    if r is None:
        return None
    return _limit_and_recover(
        state, cfg, now, current_tweak, r, cfg.r_high_hz, "refractory_tweak"
    )


def noise_controller_step(
    sample: RateSample,
    state: ControllerState,
    cfg: ControllerConfig,
    now: float,
    current_tweak: float,
) -> ControlAction | None:
    """Noise regulation: narrow the bandwidth (tweak down) while the per-pixel
    noise rate exceeds the noise limit; recover toward the default 0 once the
    noise drops below limit/H."""
    if sample.t < state.blanked_until:
        return None
    r = sample.r_noise_per_pixel_hz
    if r is None:
        return None
    return _limit_and_recover(
        state, cfg, now, current_tweak, r, cfg.r_noise_limit_hz, "bandwidth_tweak"
    )


def _limit_and_recover(
    state: ControllerState,
    cfg: ControllerConfig,
    now: float,
    current_tweak: float,
    rate: float,
    bound: float,
    target: str,
) -> ControlAction | None:
    exit_bound = bound / cfg.hysteresis
    if state.mode is Mode.IDLE:
        if rate > bound:
            state.mode = Mode.DRIVING_DOWN
        elif current_tweak < 0 and rate < exit_bound:
            state.mode = Mode.DRIVING_UP
    elif state.mode is Mode.DRIVING_DOWN:
        if rate < exit_bound:
            state.mode = Mode.DRIVING_UP if current_tweak < 0 else Mode.IDLE
    elif state.mode is Mode.DRIVING_UP:
        if rate > bound:
            state.mode = Mode.DRIVING_DOWN
        elif current_tweak >= 0:
            state.mode = Mode.IDLE
    if state.mode is Mode.IDLE:
        return None
    if state.mode is Mode.DRIVING_UP and rate >= exit_bound:
        return None  # hold inside the hysteresis band during recovery
    if now - state.last_action_t < cfg.t_bb_s:
        return None
    if state.mode is Mode.DRIVING_DOWN:
        new = _step_tweak(current_tweak, -cfg.delta_bb)
    else:
        new = _step_tweak(current_tweak, cfg.delta_bb, stop_at_zero=True)
    if new == current_tweak:
        return None
    state.last_action_t = now
    return ControlAction(
        t=now,
        target=target,
        delta=_snap(new - current_tweak),
        resulting_tweak=new,
        trigger_rate=rate,
    )


_STEP_FNS = {
    "threshold": threshold_controller_step,
    "refractory": refractory_controller_step,
    "noise": noise_controller_step,
}


@dataclass
class Supervisor:
    """Dispatches rate samples to the enabled controllers and applies actions.

    Any action (or manual override) blanks every controller's measurements for
    ``t_ignore`` and holds the global action clock, so actions from any source
    are at least ``t_bb`` apart and never consume transient-polluted samples.
    """

    cfg: ControllerConfig
    tweaks: TweakSet = field(default_factory=TweakSet)
    actuate: Callable[[TweakSet, float], None] | None = None
    enabled: dict[str, bool] = field(
        default_factory=lambda: {name: False for name in CONTROLLER_NAMES}
    )
    states: dict[str, ControllerState] = field(
        default_factory=lambda: {name: ControllerState() for name in CONTROLLER_NAMES}
    )

    def set_enabled(self, name: str, on: bool) -> None:
        if name not in CONTROLLER_NAMES:
            raise ValueError(f"unknown controller {name!r}")
        self.enabled[name] = on
        if on and self.enabled["threshold"] and self.enabled["noise"]:
            warnings.warn(
                "threshold and noise controllers enabled together; "
                "their interaction is unregulated",
                stacklevel=2,
            )

    def _after_change(self, now: float) -> None:
        until = now + self.cfg.t_ignore_s
        for st in self.states.values():
            st.blanked_until = max(st.blanked_until, until)
            st.last_action_t = max(st.last_action_t, now)

    def step(self, sample: RateSample, now: float) -> list[ControlAction]:
        """Feed one rate sample; returns the actions applied (at most one)."""
        actions: list[ControlAction] = []
        for name in CONTROLLER_NAMES:
            if not self.enabled[name]:
                continue
            action = _STEP_FNS[name](
                sample,
                self.states[name],
                self.cfg,
                now,
                getattr(self.tweaks, _TARGETS[name]),
            )
            if action is None:
                continue
            self.tweaks = self.tweaks.with_value(action.target, action.resulting_tweak)
            self._after_change(now)
            if self.actuate is not None:
                self.actuate(self.tweaks, now)
            actions.append(action)
        return actions

    def override(self, target: str, value: float, now: float) -> ControlAction:
        """Manual tweak override; actuates and blanks like any other change."""
        old = getattr(self.tweaks, target)
        self.tweaks = self.tweaks.with_value(target, value)
        new = getattr(self.tweaks, target)
        self._after_change(now)
        if self.actuate is not None:
            self.actuate(self.tweaks, now)
        return ControlAction(
            t=now, target=target, delta=_snap(new - old), resulting_tweak=new,
            trigger_rate=float("nan"),
        )
