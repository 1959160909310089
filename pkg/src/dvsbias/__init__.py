"""Event-camera pixel-array simulator with bias models, fixed-step feedback
controllers, and an experiment harness."""

from .biases import (
    BiasCurrents,
    CameraConfig,
    PixelParams,
    TweakRange,
    TweakSet,
    bandwidth_from_currents,
    currents_for_threshold,
    currents_from_tweaks,
    current_to_tweak,
    params_from_currents,
    params_from_tweaks,
    predicted_rate_from_sensitivity,
    refractory_from_current,
    thresholds_from_currents,
    tweak_to_current,
)
from .control import (
    ControlAction,
    ControllerConfig,
    ControllerState,
    Mode,
    Supervisor,
    noise_controller_step,
    refractory_controller_step,
    threshold_controller_step,
)
from .harness import ExperimentReport, Scenario, load_scenario, run, sweep, validate
from .metering import (
    BackgroundActivityFilter,
    RateMeter,
    RateSample,
    compute_rsn,
)
from .simulator import (
    EventBatch,
    NoiseModel,
    PixelArray,
    rate_oracle_eq8,
)
from .stimulus import (
    LuminanceField,
    ScenarioSchedule,
    SceneConfig,
    parse_schedule,
    render,
    serialize_schedule,
)

__version__ = "0.1.0"
