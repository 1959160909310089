"""Experiment harness: closed-loop runs and open-loop parameter sweeps.

A run wires stimulus -> pixel array -> denoiser/rate meter -> supervisor into
one fixed-step loop and writes the event stream, per-window telemetry, the
action log, and a JSON report.  A sweep executes one fresh run per grid value
of a single tweak with controllers disabled and extracts steady-state rates
(discarding the first ``t_ignore`` seconds of each run, mirroring controller
blanking).

Rate-bound convention: absolute bounds in the control block describe the
reference full-size sensor; with ``rate_scale=auto`` they are multiplied by
n_pixels / (346*260) so the stock numbers remain meaningful at desk-scale
geometries.  Per-pixel quantities (the noise limit) are never rescaled.
"""

from __future__ import annotations

import json
import math
import time as _time
from contextlib import ExitStack
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import eventio
from .biases import (
    REFERENCE_PIXEL_COUNT,
    CameraConfig,
    TweakSet,
    params_from_tweaks,
)
from .control import CONTROLLER_NAMES, ControlAction, ControllerConfig, Supervisor
from .metering import BackgroundActivityFilter, RateMeter, RateSample
from .simulator import (
    EventBatch,
    NoiseModel,
    PixelArray,
    PROV_NOISE,
    PROV_SIGNAL,
    PROV_TRANSIENT,
)
from .stimulus import (
    SceneConfig,
    ScenarioSchedule,
    max_swing_efolds,
    parse_schedule,
    render,
)

SWEEP_PARAMS = {
    "threshold": "threshold_tweak",
    "bandwidth": "bandwidth_tweak",
    "refractory": "refractory_tweak",
}


class ScenarioError(ValueError):
    """Scenario configuration is inconsistent or incomplete."""


@dataclass(frozen=True)
class SimSettings:
    width: int = 64
    height: int = 64
    duration_s: float = 30.0
    window_s: float = 0.3
    correlation_time_s: float = 0.010
    events: str = "csv"  # csv | binary | both | none
    provenance: bool = False
    dt_s: float | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ScenarioError("geometry must be positive")
        if self.duration_s < 0:
            raise ScenarioError("duration must be >= 0")
        if self.window_s <= 0:
            raise ScenarioError("window must be positive")
        if self.events not in ("csv", "binary", "both", "none"):
            raise ScenarioError(f"unknown events format {self.events!r}")


def _parse_sim_block(block: dict[str, str]) -> SimSettings:
    kwargs: dict = {}
    for key, val in block.items():
        if key == "geometry":
            try:
                w, h = val.lower().split("x")
                kwargs["width"], kwargs["height"] = int(w), int(h)
            except ValueError as e:
                raise ScenarioError(f"bad geometry {val!r}") from e
        elif key in ("duration_s", "window_s", "tau_s", "dt_s"):
            name = "correlation_time_s" if key == "tau_s" else key
            kwargs[name] = float(val)
        elif key == "events":
            kwargs["events"] = val
        elif key == "provenance":
            kwargs["provenance"] = val.lower() in ("on", "true", "1", "yes")
        else:
            raise ScenarioError(f"unknown sim key {key!r}")
    return SimSettings(**kwargs)


def _parse_noise_block(block: dict[str, str]) -> NoiseModel:
    mapping = {
        "base_rate_hz": "base_rate_hz",
        "alpha": "alpha",
        "beta": "beta",
        "delta": "delta",
        "on_fraction": "on_fraction",
        "reference_luminance": "reference_luminance",
        "kappa": "burst_events_per_pixel",
        "burst_decay_s": "burst_decay_s",
    }
    kwargs = {}
    for key, val in block.items():
        if key not in mapping:
            raise ScenarioError(f"unknown noise key {key!r}")
        kwargs[mapping[key]] = float(val)
    return NoiseModel(**kwargs)


def _parse_scene_block(block: dict[str, str]) -> SceneConfig:
    kwargs: dict = {}
    for key, val in block.items():
        if key in ("orbit_frac", "dot_radius_frac"):
            kwargs[key] = float(val)
        elif key == "supersample":
            kwargs[key] = int(val)
        else:
            raise ScenarioError(f"unknown scene key {key!r}")
    return SceneConfig(**kwargs)


@dataclass
class Scenario:
    """Fully resolved experiment description."""

    name: str
    schedule: ScenarioSchedule
    settings: SimSettings = SimSettings()
    camera: CameraConfig = CameraConfig()
    noise: NoiseModel = NoiseModel()
    scene: SceneConfig = SceneConfig()
    control: ControllerConfig = ControllerConfig()
    rate_scale: float | str = "auto"
    checks: dict[str, str] = field(default_factory=dict)
    sweep_defaults: dict[str, str] = field(default_factory=dict)

    @property
    def n_pixels(self) -> int:
        return self.settings.width * self.settings.height

    def effective_rate_scale(self) -> float:
        if self.rate_scale == "auto":
            return self.n_pixels / REFERENCE_PIXEL_COUNT
        return float(self.rate_scale)

    def effective_control(self) -> ControllerConfig:
        s = self.effective_rate_scale()
        return replace(
            self.control,
            r_high_hz=self.control.r_high_hz * s,
            r_low_hz=self.control.r_low_hz * s,
        )


def load_scenario(source: str | Path, name: str | None = None) -> Scenario:
    """Load a scenario from a file path or raw scenario text."""
    path: Path | None = None
    if isinstance(source, Path) or (
        "\n" not in str(source) and Path(source).exists()
    ):
        path = Path(source)
        text = path.read_text()
    else:
        text = str(source)
    schedule = parse_schedule(text)
    blocks = schedule.blocks
    control_block = dict(blocks.get("control", {}))
    rate_scale: float | str = control_block.pop("rate_scale", "auto")
    if rate_scale != "auto":
        rate_scale = float(rate_scale)
    return Scenario(
        name=name or (path.stem if path else "inline"),
        schedule=schedule,
        settings=_parse_sim_block(blocks.get("sim", {})),
        camera=CameraConfig.from_mapping(blocks.get("camera", {})),
        noise=_parse_noise_block(blocks.get("noise", {})),
        scene=_parse_scene_block(blocks.get("scene", {})),
        control=ControllerConfig.from_mapping(control_block),
        rate_scale=rate_scale,
        checks=dict(blocks.get("check", {})),
        sweep_defaults=dict(blocks.get("sweep", {})),
    )


def choose_dt(scenario: Scenario) -> float:
    """Fixed step: min(1/(4 * max bandwidth over the run), window/10).

    The bandwidth bound covers every tweak the run can reach: scripted
    overrides, the initial value, and 0 (the recovery target) whenever the
    noise controller is ever enabled.
    """
    if scenario.settings.dt_s is not None:
        return scenario.settings.dt_s
    bw_tweaks = [0.0]
    for d in scenario.schedule.directives:
        if d.bandwidth_tweak is not None:
            bw_tweaks.append(d.bandwidth_tweak)
    max_bw = params_from_tweaks(
        TweakSet(bandwidth_tweak=max(bw_tweaks)), scenario.camera
    ).bandwidth_hz
    dt = scenario.settings.window_s / 10.0
    if math.isfinite(max_bw):
        dt = min(dt, 1.0 / (4.0 * max_bw))
    return dt


@dataclass
class TelemetryRow:
    sample: RateSample
    tweaks: TweakSet
    states: str

    def as_dict(self) -> dict:
        s = self.sample
        return {
            "t_s": s.t,
            "r_input_hz": s.r_input_hz,
            "r_signal_hz": s.r_signal_hz,
            "r_noise_hz": s.r_noise_hz,
            "r_noise_per_pixel_hz": s.r_noise_per_pixel_hz,
            "r_sn": s.r_sn,
            "thr_tweak": self.tweaks.threshold_tweak,
            "bw_tweak": self.tweaks.bandwidth_tweak,
            "refr_tweak": self.tweaks.refractory_tweak,
            "controller_states": self.states,
        }


@dataclass
class ExperimentReport:
    scenario: str
    kind: str
    seed: int
    sim_duration_s: float
    wall_seconds: float
    dt_s: float
    n_events: int
    events_by_provenance: dict[str, int]
    telemetry: list[TelemetryRow] = field(default_factory=list)
    actions: list[ControlAction] = field(default_factory=list)
    table: list[dict] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "kind": self.kind,
            "seed": self.seed,
            "sim_duration_s": self.sim_duration_s,
            "wall_seconds": self.wall_seconds,
            "dt_s": self.dt_s,
            "n_events": self.n_events,
            "events_by_provenance": self.events_by_provenance,
            "n_actions": len(self.actions),
            "table": self.table,
            "stats": self.stats,
            "checks": self.checks,
            "passed": self.passed,
        }


def _controller_states_string(sup: Supervisor) -> str:
    parts = []
    for name in CONTROLLER_NAMES:
        parts.append(
            f"{name}:{sup.states[name].mode.value if sup.enabled[name] else 'off'}"
        )
    return "|".join(parts)


def run(
    scenario: Scenario | str | Path,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Execute a scenario closed-loop and return (and optionally write) results."""
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    wall0 = _time.perf_counter()
    settings = scenario.settings
    w, h = settings.width, settings.height
    dt = choose_dt(scenario)
    n_steps = int(round(settings.duration_s / dt)) if settings.duration_s > 0 else 0
    duration = n_steps * dt

    # initial operating point and controller flags come from the t=0 directive
    tweaks = TweakSet()
    enabled0 = {name: False for name in CONTROLLER_NAMES}
    directives = list(scenario.schedule.directives)
    if directives and directives[0].t == 0.0:
        d0 = directives[0]
        tweaks = TweakSet(
            threshold_tweak=d0.threshold_tweak or 0.0,
            bandwidth_tweak=d0.bandwidth_tweak or 0.0,
            refractory_tweak=d0.refractory_tweak or 0.0,
        )
        for name in CONTROLLER_NAMES:
            flag = getattr(d0, f"{name}_controller")
            if flag is not None:
                enabled0[name] = flag
        directives = directives[1:]

    nominal_params = params_from_tweaks(TweakSet(), scenario.camera)
    params = params_from_tweaks(tweaks, scenario.camera)
    sim = PixelArray(
        w, h, params, scenario.noise, nominal_params=nominal_params, seed=seed
    )
    baf = BackgroundActivityFilter(w, h, settings.correlation_time_s)
    meter = RateMeter(settings.window_s, scenario.n_pixels)
    sup = Supervisor(
        scenario.effective_control(),
        tweaks,
        actuate=lambda tw, t: sim.apply_biases(params_from_tweaks(tw, scenario.camera), t),
    )
    for name, on in enabled0.items():
        if on:
            sup.set_enabled(name, on)

    report = ExperimentReport(
        scenario=scenario.name,
        kind="run",
        seed=seed,
        sim_duration_s=duration,
        wall_seconds=0.0,
        dt_s=dt,
        n_events=0,
        events_by_provenance={"signal": 0, "noise": 0, "transient": 0},
    )

    with ExitStack() as stack:
        ev_csv = ev_bin = telemetry_w = actions_w = None
        out = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            if settings.events in ("csv", "both"):
                fh = stack.enter_context(open(out / "events.csv", "w"))
                ev_csv = eventio.EventCsvWriter(fh, provenance=settings.provenance)
            if settings.events in ("binary", "both"):
                fb = stack.enter_context(open(out / "events.bin", "wb"))
                ev_bin = eventio.EventBinaryWriter(fb, provenance=settings.provenance)
            ft = stack.enter_context(open(out / "telemetry.csv", "w", newline=""))
            telemetry_w = eventio.TelemetryWriter(ft)
            fa = stack.enter_context(open(out / "actions.csv", "w", newline=""))
            actions_w = eventio.ActionsWriter(fa)

        def handle_samples(samples: list[RateSample]) -> None:
            for s in samples:
                actions = sup.step(s, now=s.t)
                row = TelemetryRow(s, sup.tweaks, _controller_states_string(sup))
                report.telemetry.append(row)
                if telemetry_w is not None:
                    telemetry_w.write(s, sup.tweaks, row.states)
                for a in actions:
                    report.actions.append(a)
                    if actions_w is not None:
                        actions_w.write(a)

        di = 0
        for k in range(n_steps):
            t0 = k * dt
            t1 = (k + 1) * dt
            while di < len(directives) and directives[di].t <= t0:
                d = directives[di]
                di += 1
                for name in CONTROLLER_NAMES:
                    flag = getattr(d, f"{name}_controller")
                    if flag is not None:
                        sup.set_enabled(name, flag)
                for target in ("threshold_tweak", "bandwidth_tweak", "refractory_tweak"):
                    value = getattr(d, target)
                    if value is not None:
                        action = sup.override(target, value, now=t0)
                        report.actions.append(action)
                        if actions_w is not None:
                            actions_w.write(action)
            field_t1 = render(scenario.schedule, t1, w, h, scenario.scene)
            try:
                batch = sim.step(field_t1.samples, dt)
            except Exception as e:
                raise RuntimeError(f"simulation failed at t={t0:.6f}s: {e}") from e
            if len(batch):
                mask = baf.classify_batch(batch)
                report.n_events += len(batch)
                report.events_by_provenance["signal"] += int(
                    np.count_nonzero(batch.provenance == PROV_SIGNAL)
                )
                report.events_by_provenance["noise"] += int(
                    np.count_nonzero(batch.provenance == PROV_NOISE)
                )
                report.events_by_provenance["transient"] += int(
                    np.count_nonzero(batch.provenance == PROV_TRANSIENT)
                )
                if ev_csv is not None:
                    ev_csv.write(batch)
                if ev_bin is not None:
                    ev_bin.write(batch)
                handle_samples(meter.add(batch.t_us, mask))
            handle_samples(meter.advance_to(t1))

    report.wall_seconds = _time.perf_counter() - wall0
    report.stats = _run_stats(report)
    report.checks = _evaluate_checks(scenario, report)
    if out_dir is not None:
        _write_report(Path(out_dir), report)
    return report


def _run_stats(report: ExperimentReport) -> dict:
    rates = [row.sample.r_input_hz for row in report.telemetry]
    return {
        "windows": len(report.telemetry),
        "mean_rate_hz": float(np.mean(rates)) if rates else 0.0,
        "max_rate_hz": float(np.max(rates)) if rates else 0.0,
        "n_actions": len(report.actions),
    }


def _steady_rates(report: ExperimentReport, t_ignore_s: float) -> dict:
    """Average the post-transient portion of a run's telemetry."""
    rows = [r.sample for r in report.telemetry if r.sample.t > t_ignore_s]
    if not rows:
        return {
            "r_input_hz": 0.0,
            "r_signal_hz": 0.0,
            "r_noise_hz": 0.0,
            "r_noise_per_pixel_hz": 0.0,
            "r_sn": None,
        }
    sig = float(np.mean([r.r_signal_hz for r in rows]))
    noi = float(np.mean([r.r_noise_hz for r in rows]))
    total = sig + noi
    return {
        "r_input_hz": sig + noi,
        "r_signal_hz": sig,
        "r_noise_hz": noi,
        "r_noise_per_pixel_hz": float(np.mean([r.r_noise_per_pixel_hz for r in rows])),
        "r_sn": (sig - noi) / total if total > 0 else None,
    }


def _with_initial_tweak(scenario: Scenario, target: str, value: float) -> Scenario:
    """Fresh scenario whose t=0 directive pins one tweak to a grid value."""
    directives = list(scenario.schedule.directives)
    if directives and directives[0].t == 0.0:
        directives[0] = replace(directives[0], **{target: value})
    else:
        from .stimulus import Directive

        directives.insert(0, Directive(t=0.0, **{target: value}))
    schedule = ScenarioSchedule(directives=directives, blocks=scenario.schedule.blocks)
    return replace(scenario, schedule=schedule)


def sweep(
    scenario: Scenario | str | Path,
    param: str | None = None,
    grid: list[float] | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Open-loop sweep: one fresh run per grid value of a single tweak."""
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    wall0 = _time.perf_counter()
    if param is None:
        param = scenario.sweep_defaults.get("param")
    if grid is None and "grid" in scenario.sweep_defaults:
        grid = [float(v) for v in scenario.sweep_defaults["grid"].split(",")]
    if param not in SWEEP_PARAMS:
        raise ScenarioError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
    if not grid:
        raise ScenarioError("sweep grid is empty")
    for d in scenario.schedule.directives:
        for name in CONTROLLER_NAMES:
            if getattr(d, f"{name}_controller"):
                raise ScenarioError("controllers must be disabled during sweeps")
    target = SWEEP_PARAMS[param]

    report = ExperimentReport(
        scenario=scenario.name,
        kind="sweep",
        seed=seed,
        sim_duration_s=0.0,
        wall_seconds=0.0,
        dt_s=0.0,
        n_events=0,
        events_by_provenance={"signal": 0, "noise": 0, "transient": 0},
    )
    t_ignore = scenario.control.t_ignore_s
    for i, value in enumerate(grid):
        scn_i = _with_initial_tweak(scenario, target, value)
        sub_dir = Path(out_dir) / f"point_{i:02d}" if out_dir is not None else None
        rep_i = run(scn_i, seed=seed, out_dir=sub_dir)
        report.sim_duration_s += rep_i.sim_duration_s
        report.n_events += rep_i.n_events
        for key in report.events_by_provenance:
            report.events_by_provenance[key] += rep_i.events_by_provenance[key]
        params_i = params_from_tweaks(
            TweakSet(**{target: value}), scenario.camera
        )
        row = {
            "value": value,
            "theta_efolds": params_i.theta_on,
            "sensitivity_ev_per_efold": params_i.sensitivity,
            "bandwidth_hz": params_i.bandwidth_hz,
            "refractory_s": params_i.refractory_s,
        }
        row.update(_steady_rates(rep_i, t_ignore))
        report.table.append(row)
        report.dt_s = rep_i.dt_s

    report.stats = _sweep_stats(param, report.table, scenario)
    report.checks = _evaluate_checks(scenario, report)
    report.wall_seconds = _time.perf_counter() - wall0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_sweep_csv(out / "sweep.csv", report.table)
        _write_report(out, report)
    return report


def linear_fit(x: np.ndarray, y: np.ndarray) -> dict:
    """Least-squares line with coefficient of determination."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 2:
        raise ValueError("need at least two points to fit")
    slope, offset = np.polyfit(x, y, 1)
    pred = slope * x + offset
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "offset": float(offset), "r2": r2}


def _sweep_stats(param: str, table: list[dict], scenario: Scenario) -> dict:
    stats: dict = {"param": param, "points": len(table)}
    if len(table) < 2:
        return stats
    if param == "threshold":
        sigma = np.array([row["sensitivity_ev_per_efold"] for row in table])
        rate = np.array([row["r_input_hz"] for row in table])
        lo = float(scenario.checks.get("fit_sigma_min", -math.inf))
        hi = float(scenario.checks.get("fit_sigma_max", math.inf))
        mask = (sigma >= lo) & (sigma <= hi)
        if np.count_nonzero(mask) >= 2:
            fit = linear_fit(sigma[mask], rate[mask])
            stats["fit"] = fit
            if fit["slope"] > 0:
                stats["sigma_intercept"] = -fit["offset"] / fit["slope"]
        swing = max_swing_efolds(scenario.schedule)
        if swing > 0:
            stats["scene_sigma_min"] = 1.0 / swing
    elif param == "bandwidth":
        logb = np.log10([row["bandwidth_hz"] for row in table])
        rs = np.array([row["r_signal_hz"] for row in table])
        rn = np.array([row["r_noise_hz"] for row in table])
        first = logb <= logb.min() + 1.0
        last = logb >= logb.max() - 1.0
        if np.count_nonzero(first) >= 2 and np.count_nonzero(last) >= 2:
            stats["rs_first_decade_slope"] = linear_fit(logb[first], rs[first])["slope"]
            stats["rs_last_decade_slope"] = linear_fit(logb[last], rs[last])["slope"]
        stats["rn_strictly_increasing"] = bool(np.all(np.diff(rn) > 0))
        rsn = [row["r_sn"] for row in table]
        if all(v is not None for v in rsn):
            arg = int(np.argmax(rsn))
            stats["rsn_argmax"] = arg
            stats["rsn_interior_max"] = bool(0 < arg < len(rsn) - 1)
    elif param == "refractory":
        refr = np.array([row["refractory_s"] for row in table])
        rate = np.array([row["r_input_hz"] for row in table])
        order = np.argsort(refr)
        rate_by_refr = rate[order]
        tol = 0.01 * float(rate.max()) if rate.size else 0.0
        stats["rate_nonincreasing_in_refractory"] = bool(
            np.all(np.diff(rate_by_refr) <= tol)
        )
        stats["fit_vs_refractory"] = linear_fit(refr, rate)
    return stats


def _evaluate_checks(scenario: Scenario, report: ExperimentReport) -> dict[str, bool]:
    checks: dict[str, bool] = {}
    raw = scenario.checks
    stats = report.stats
    if "r2_min" in raw:
        fit = stats.get("fit")
        checks["r2_min"] = fit is not None and fit["r2"] >= float(raw["r2_min"])
        checks["slope_positive"] = fit is not None and fit["slope"] > 0
    if "intercept_tol" in raw:
        target = raw.get("intercept_target", "auto")
        target_v = (
            stats.get("scene_sigma_min") if target == "auto" else float(target)
        )
        got = stats.get("sigma_intercept")
        ok = (
            target_v is not None
            and got is not None
            and abs(got - target_v) <= float(raw["intercept_tol"]) * target_v
        )
        checks["sigma_intercept"] = ok
    if "slope_ratio_max" in raw:
        first = stats.get("rs_first_decade_slope")
        last = stats.get("rs_last_decade_slope")
        checks["rs_saturates"] = (
            first is not None
            and last is not None
            and first > 0
            and last < float(raw["slope_ratio_max"]) * first
        )
    if raw.get("rn_increasing") == "1":
        checks["rn_increasing"] = bool(stats.get("rn_strictly_increasing"))
    if raw.get("rsn_interior") == "1":
        checks["rsn_interior_max"] = bool(stats.get("rsn_interior_max"))
    if raw.get("rate_nonincreasing") == "1":
        checks["rate_nonincreasing"] = bool(
            stats.get("rate_nonincreasing_in_refractory")
        )
    return checks


def _write_sweep_csv(path: Path, table: list[dict]) -> None:
    if not table:
        path.write_text("")
        return
    cols = list(table[0].keys())
    lines = [",".join(cols)]
    for row in table:
        lines.append(
            ",".join("" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols)
        )
    path.write_text("\n".join(lines) + "\n")


def _write_report(out: Path, report: ExperimentReport) -> None:
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate(source: str | Path) -> Scenario:
    """Parse and fully resolve a scenario, raising on any config error."""
    scenario = load_scenario(source)
    choose_dt(scenario)
    params_from_tweaks(TweakSet(), scenario.camera)
    return scenario
