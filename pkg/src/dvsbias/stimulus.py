"""Scripted luminance stimulus: scenario schedules and orbiting-dot rendering.

A scenario is a line-oriented text file.  Lines starting with a block name
(``sim``, ``camera``, ``noise``, ``scene``, ``control``, ``check``, ``sweep``)
carry ``key=value`` configuration pairs that other modules interpret.  Lines
starting with ``t=<seconds>`` are timed directives that change the stimulus,
override tweaks manually, or flip controller enable flags.  Directive
timestamps must be strictly increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_AMBIENT = 100.0
DEFAULT_CONTRAST = (0.5,)

BLOCK_NAMES = ("sim", "camera", "noise", "scene", "control", "check", "sweep")

_DIRECTIVE_FLOAT_KEYS = (
    "ambient",
    "dot_speed_hz",
    "threshold_tweak",
    "bandwidth_tweak",
    "refractory_tweak",
)
_DIRECTIVE_FLAG_KEYS = ("threshold_controller", "refractory_controller", "noise_controller")


class ScheduleError(ValueError):
    """Scenario text failed to parse or violates schedule invariants."""


@dataclass(frozen=True)
class LuminanceField:
    """Per-pixel linear luminance (arbitrary units, strictly positive)."""

    width: int
    height: int
    samples: np.ndarray  # shape (height, width), float64
    timestamp: float

    def __post_init__(self):
        if self.samples.shape != (self.height, self.width):
            raise ValueError(
                f"samples shape {self.samples.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if not np.all(self.samples > 0.0):
            raise ValueError("luminance must be strictly positive everywhere")


@dataclass(frozen=True)
class Directive:
    """One timed scenario directive; unset fields leave the previous value."""

    t: float
    ambient: float | None = None
    dot_count: int | None = None
    dot_speed_hz: float | None = None
    dot_contrast: tuple[float, ...] | None = None
    threshold_tweak: float | None = None
    bandwidth_tweak: float | None = None
    refractory_tweak: float | None = None
    threshold_controller: bool | None = None
    refractory_controller: bool | None = None
    noise_controller: bool | None = None


@dataclass(frozen=True)
class SceneConfig:
    """Dot geometry: orbit radius and dot radius as fractions of min(w, h)."""

    orbit_frac: float = 0.3
    dot_radius_frac: float = 0.08
    supersample: int = 4

    def __post_init__(self):
        if not (0.0 < self.orbit_frac < 0.5 and 0.0 < self.dot_radius_frac < 0.5):
            raise ScheduleError("orbit_frac and dot_radius_frac must be in (0, 0.5)")
        if self.supersample < 1:
            raise ScheduleError("supersample must be >= 1")


@dataclass
class ScenarioSchedule:
    """Ordered timed directives plus raw configuration blocks.

    The blocks are uninterpreted key/value maps; the harness resolves them into
    the camera, noise, controller, and scene configurations.
    """

    directives: list[Directive] = field(default_factory=list)
    blocks: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        last = -math.inf
        for i, d in enumerate(self.directives):
            if d.t < 0:
                raise ScheduleError(f"directive {i}: negative timestamp {d.t}")
            if d.t <= last:
                raise ScheduleError(
                    f"directive {i}: timestamp {d.t} not strictly increasing"
                )
            last = d.t
            if d.ambient is not None and not d.ambient > 0:
                raise ScheduleError(f"directive {i}: ambient must be positive")
            if d.dot_count is not None and d.dot_count < 0:
                raise ScheduleError(f"directive {i}: dot_count must be >= 0")
            if d.dot_contrast is not None:
                for c in d.dot_contrast:
                    if not (0.0 <= c < 1.0):
                        raise ScheduleError(
                            f"directive {i}: contrast {c} outside [0, 1)"
                        )


def _parse_bool(token: str, lineno: int) -> bool:
    t = token.lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ScheduleError(f"line {lineno}: expected on/off, got {token!r}")


def _parse_directive(pairs: list[tuple[str, str]], lineno: int) -> Directive:
    kwargs: dict = {}
    for key, val in pairs:
        try:
            if key == "t":
                kwargs["t"] = float(val)
            elif key == "dot_count":
                kwargs["dot_count"] = int(val)
            elif key == "dot_contrast":
                kwargs["dot_contrast"] = tuple(float(v) for v in val.split(","))
            elif key in _DIRECTIVE_FLOAT_KEYS:
                kwargs[key] = float(val)
            elif key in _DIRECTIVE_FLAG_KEYS:
                kwargs[key] = _parse_bool(val, lineno)
            else:
                raise ScheduleError(f"line {lineno}: unknown directive key {key!r}")
        except ValueError as e:
            if isinstance(e, ScheduleError):
                raise
            raise ScheduleError(f"line {lineno}: bad value for {key!r}: {val!r}") from e
    return Directive(**kwargs)


def parse_schedule(text: str) -> ScenarioSchedule:
    """Parse scenario text into a schedule.

    Syntax errors are reported with their line number; semantic errors (bad
    ranges, non-monotone timestamps) with the offending directive index.
    """
    directives: list[Directive] = []
    blocks: dict[str, dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        pairs: list[tuple[str, str]] = []
        if tokens[0] in BLOCK_NAMES:
            block = tokens[0]
            for tok in tokens[1:]:
                if "=" not in tok:
                    raise ScheduleError(f"line {lineno}: expected key=value, got {tok!r}")
                k, v = tok.split("=", 1)
                blocks.setdefault(block, {})[k] = v
            continue
        for tok in tokens:
            if "=" not in tok:
                raise ScheduleError(f"line {lineno}: expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            pairs.append((k, v))
        if not pairs or pairs[0][0] != "t":
            raise ScheduleError(f"line {lineno}: directive must start with t=<seconds>")
        directives.append(_parse_directive(pairs, lineno))
    return ScenarioSchedule(directives=directives, blocks=blocks)


def serialize_schedule(schedule: ScenarioSchedule) -> str:
    """Render a schedule back to scenario text (parse round-trips)."""
    lines = []
    for block in sorted(schedule.blocks):
        kv = " ".join(f"{k}={v}" for k, v in schedule.blocks[block].items())
        lines.append(f"{block} {kv}")
    for d in schedule.directives:
        parts = [f"t={d.t!r}"]
        if d.ambient is not None:
            parts.append(f"ambient={d.ambient!r}")
        if d.dot_count is not None:
            parts.append(f"dot_count={d.dot_count}")
        if d.dot_speed_hz is not None:
            parts.append(f"dot_speed_hz={d.dot_speed_hz!r}")
        if d.dot_contrast is not None:
            parts.append("dot_contrast=" + ",".join(repr(c) for c in d.dot_contrast))
        for key in ("threshold_tweak", "bandwidth_tweak", "refractory_tweak"):
            v = getattr(d, key)
            if v is not None:
                parts.append(f"{key}={v!r}")
        for key in _DIRECTIVE_FLAG_KEYS:
            v = getattr(d, key)
            if v is not None:
                parts.append(f"{key}={'on' if v else 'off'}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class StimulusState:
    """Stimulus parameters in force at a particular time, with the rotation
    phase accumulated across speed changes (so dots never jump)."""

    ambient: float
    dot_count: int
    dot_speed_hz: float
    dot_contrast: tuple[float, ...]
    phase: float  # revolutions


def resolve_state(schedule: ScenarioSchedule, t: float) -> StimulusState:
    ambient = DEFAULT_AMBIENT
    count = 0
    speed = 0.0
    contrast = DEFAULT_CONTRAST
    phase = 0.0
    t_prev = 0.0
    for d in schedule.directives:
        if d.t > t:
            break
        phase += speed * (d.t - t_prev)
        t_prev = d.t
        if d.ambient is not None:
            ambient = d.ambient
        if d.dot_count is not None:
            count = d.dot_count
        if d.dot_speed_hz is not None:
            speed = d.dot_speed_hz
        if d.dot_contrast is not None:
            contrast = d.dot_contrast
    phase += speed * (t - t_prev)
    return StimulusState(ambient, count, speed, contrast, phase)


def _disk_coverage(
    width: int, height: int, cx: float, cy: float, radius: float, supersample: int
) -> tuple[slice, slice, np.ndarray] | None:
    """Supersampled coverage of a disk over the pixel patch it touches.

    Returns (row slice, col slice, coverage in [0, 1]) or None if the disk
    misses the array entirely.
    """
    x0 = max(0, int(math.floor(cx - radius)))
    x1 = min(width, int(math.ceil(cx + radius)) + 1)
    y0 = max(0, int(math.floor(cy - radius)))
    y1 = min(height, int(math.ceil(cy + radius)) + 1)
    if x0 >= x1 or y0 >= y1:
        return None
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).ravel()  # (nx*ss,)
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).ravel()
    dx2 = (xs - cx) ** 2
    dy2 = (ys - cy) ** 2
    inside = (dy2[:, None] + dx2[None, :]) <= radius * radius
    ny, nx = y1 - y0, x1 - x0
    cov = inside.reshape(ny, ss, nx, ss).mean(axis=(1, 3))
    return slice(y0, y1), slice(x0, x1), cov


def render(
    schedule: ScenarioSchedule,
    t: float,
    width: int,
    height: int,
    scene: SceneConfig = SceneConfig(),
) -> LuminanceField:
    """Deterministic luminance field at time t.

    Dark dots of luminance ambient*(1-contrast) orbit the array centre at the
    scheduled rotation rate, equally spaced in phase; edges are anti-aliased by
    supersampled coverage.  Pure function of (schedule, t).
    """
    if t < 0:
        raise ValueError(f"time must be non-negative (got {t})")
    if width <= 0 or height <= 0:
        raise ValueError("geometry must be positive")
    state = resolve_state(schedule, t)
    samples = np.full((height, width), state.ambient, dtype=np.float64)
    if state.dot_count > 0:
        size = min(width, height)
        orbit_r = scene.orbit_frac * size
        dot_r = scene.dot_radius_frac * size
        ocx, ocy = width / 2.0, height / 2.0
        for j in range(state.dot_count):
            contrast = state.dot_contrast[j % len(state.dot_contrast)]
            if contrast <= 0.0:
                continue
            angle = 2.0 * math.pi * (state.phase + j / state.dot_count)
            cx = ocx + orbit_r * math.cos(angle)
            cy = ocy + orbit_r * math.sin(angle)
            patch = _disk_coverage(width, height, cx, cy, dot_r, scene.supersample)
            if patch is None:
                continue
            rows, cols, cov = patch
            samples[rows, cols] *= 1.0 - cov * contrast
    return LuminanceField(width=width, height=height, samples=samples, timestamp=t)


def max_swing_efolds(schedule: ScenarioSchedule) -> float:
    """Largest log-luminance swing (e-folds) any dot in the schedule produces.

    This is the scene's highest temporal contrast; its reciprocal is the
    sensitivity below which the scene stops producing events.
    """
    best = 0.0
    for d in schedule.directives:
        if d.dot_contrast is not None:
            for c in d.dot_contrast:
                if c > 0:
                    best = max(best, -math.log(1.0 - c))
    return best
