"""Online measurement stack: event-rate box filtering, correlation denoising,
and the normalized signal-minus-noise statistic.

The denoiser is the classic background-activity filter: an event is signal iff
any of its 8 neighbours fired within the correlation time; its own pixel's
history never vouches for it (that would pass refractory-limited retriggers).
The timestamp map updates on every event, kept or not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simulator import EventBatch

_FAR_PAST = np.int64(-(2**62))


class EventOrderError(ValueError):
    """Events were fed out of timestamp order."""


@dataclass(frozen=True)
class RateSample:
    """Windowed rates at a measurement boundary.

    ``r_input_hz`` always equals signal + noise exactly (event counting);
    ``r_sn`` is None when the window held no events.
    """

    t: float
    r_input_hz: float
    r_signal_hz: float
    r_noise_hz: float
    r_sn: float | None
    r_noise_per_pixel_hz: float


def compute_rsn(r_signal_hz: float, r_noise_hz: float) -> float | None:
    """Normalized signal-minus-noise difference in [-1, 1]; None when both zero."""
    if r_signal_hz < 0 or r_noise_hz < 0:
        raise ValueError("rates must be non-negative")
    total = r_signal_hz + r_noise_hz
    if total == 0:
        return None
    return (r_signal_hz - r_noise_hz) / total


class BackgroundActivityFilter:
    """Causal spatiotemporal correlation denoiser with per-pixel last-event map."""

    def __init__(self, width: int, height: int, correlation_time_s: float = 0.010):
        if correlation_time_s <= 0:
            raise ValueError("correlation time must be positive")
        self.width = width
        self.height = height
        self.correlation_time_us = np.int64(round(correlation_time_s * 1e6))
        # 1-pixel border so the 3x3 neighbourhood never needs bounds checks
        self._last = np.full((height + 2, width + 2), _FAR_PAST, dtype=np.int64)
        self._t_prev = _FAR_PAST

    def classify(self, t_us: int, x: int, y: int) -> bool:
        """True if the event is signal; updates the timestamp map either way."""
        if t_us < self._t_prev:
            raise EventOrderError(
                f"event at {t_us}us arrived after {self._t_prev}us"
            )
        self._t_prev = t_us
        last = self._last
        r, c = y + 1, x + 1
        own = last[r, c]
        last[r, c] = _FAR_PAST  # exclude the event's own pixel from the window
        newest = last[r - 1 : r + 2, c - 1 : c + 2].max()
        last[r, c] = t_us  # own-pixel timestamp updates regardless of the verdict
        return bool(t_us - newest <= self.correlation_time_us) if newest > _FAR_PAST else False

    def classify_batch(self, batch: EventBatch) -> np.ndarray:
        """Vector of signal flags for a time-ordered batch (sequential state)."""
        n = len(batch)
        out = np.empty(n, dtype=bool)
        last = self._last
        tau = int(self.correlation_time_us)
        far = int(_FAR_PAST)
        t_prev = int(self._t_prev)
        ts = batch.t_us.tolist()
        xs = batch.x.tolist()
        ys = batch.y.tolist()
        for i in range(n):
            t = ts[i]
            if t < t_prev:
                raise EventOrderError(f"event at {t}us arrived after {t_prev}us")
            t_prev = t
            r = ys[i] + 1
            c = xs[i] + 1
            win = last[r - 1 : r + 2, c - 1 : c + 2]
            own = win[1, 1]
            win[1, 1] = far
            newest = win.max()
            win[1, 1] = t
            out[i] = (newest > far) and (t - newest <= tau)
        self._t_prev = np.int64(t_prev)
        return out


class RateMeter:
    """Box-filter rate meter: counts per fixed window, one sample per boundary.

    Windows tile [0, inf) at the configured width; samples are emitted when the
    simulation clock passes a boundary, including zero-count windows.
    """

    def __init__(self, window_s: float, n_pixels: int):
        if window_s <= 0:
            raise ValueError("window must be positive")
        self.window_s = window_s
        self.window_us = np.int64(round(window_s * 1e6))
        self.n_pixels = n_pixels
        self._win = 0  # index of the currently open window
        self._sig = 0
        self._noi = 0

    def _close(self) -> RateSample:
        w = self.window_s
        sig = self._sig / w
        noi = self._noi / w
        sample = RateSample(
            t=float((self._win + 1) * self.window_us) * 1e-6,
            r_input_hz=sig + noi,
            r_signal_hz=sig,
            r_noise_hz=noi,
            r_sn=compute_rsn(sig, noi),
            r_noise_per_pixel_hz=noi / self.n_pixels,
        )
        self._win += 1
        self._sig = 0
        self._noi = 0
        return sample

    def add(self, t_us: np.ndarray, signal_mask: np.ndarray) -> list[RateSample]:
        """Feed time-ordered events; returns samples for any windows closed."""
        out: list[RateSample] = []
        if len(t_us) == 0:
            return out
        wins = t_us // self.window_us
        if wins[0] < self._win:
            raise EventOrderError("events fed into an already-closed window")
        for w in np.unique(wins):
            while self._win < w:
                out.append(self._close())
            sel = wins == w
            nsig = int(np.count_nonzero(signal_mask[sel]))
            self._sig += nsig
            self._noi += int(np.count_nonzero(sel)) - nsig
        return out

    def advance_to(self, t_s: float) -> list[RateSample]:
        """Close every window that ends at or before t_s."""
        out: list[RateSample] = []
        target = int(np.floor(t_s * 1e6 + 0.5)) // int(self.window_us)
        while self._win < target:
            out.append(self._close())
        return out


def classification_metrics(provenance: np.ndarray, signal_mask: np.ndarray) -> dict:
    """Ground-truth denoiser quality: recall on signal tags, rejection on noise
    tags.  Transient-tagged events belong to neither class and are excluded."""
    from .simulator import PROV_NOISE, PROV_SIGNAL

    sig = provenance == PROV_SIGNAL
    noi = provenance == PROV_NOISE
    n_sig = int(np.count_nonzero(sig))
    n_noi = int(np.count_nonzero(noi))
    recall = float(np.count_nonzero(signal_mask & sig)) / n_sig if n_sig else float("nan")
    rejection = float(np.count_nonzero(~signal_mask & noi)) / n_noi if n_noi else float("nan")
    return {
        "signal_events": n_sig,
        "noise_events": n_noi,
        "signal_recall": recall,
        "noise_rejection": rejection,
    }
