"""Event-stream and telemetry file formats.

Events ship in two equivalent forms:

* plain CSV with header ``t_us,x,y,polarity[,provenance]`` (polarity 1=ON,
  0=OFF; provenance one of signal/noise/transient, present only when
  ground-truth export is enabled), and
* a compact binary stream: 8-byte magic ``EVSTRM1\\n`` + 1 flag byte (bit 0 set
  when a provenance byte follows each record), then little-endian records of
  u32 t_us, u16 x, u16 y, u8 flags (bit 0 polarity, bits 1-2 provenance).

Telemetry and action logs are one-row-per-record CSV files.
"""

from __future__ import annotations

import csv
import struct
from typing import IO, Iterable

import numpy as np

from .control import ControlAction
from .metering import RateSample
from .simulator import EventBatch, PROVENANCE_CODES, PROVENANCE_NAMES

BINARY_MAGIC = b"EVSTRM1\n"

TELEMETRY_COLUMNS = [
    "t_s",
    "r_input_hz",
    "r_signal_hz",
    "r_noise_hz",
    "r_noise_per_pixel_hz",
    "r_sn",
    "thr_tweak",
    "bw_tweak",
    "refr_tweak",
    "controller_states",
]

ACTION_COLUMNS = ["t_s", "target", "delta", "resulting_tweak", "trigger_rate"]


class EventCsvWriter:
    def __init__(self, fh: IO[str], provenance: bool = False):
        self._fh = fh
        self.provenance = provenance
        cols = "t_us,x,y,polarity"
        if provenance:
            cols += ",provenance"
        fh.write(cols + "\n")

    def write(self, batch: EventBatch) -> None:
        if len(batch) == 0:
            return
        if self.provenance:
            rows = (
                f"{t},{x},{y},{p},{PROVENANCE_NAMES[v]}\n"
                for t, x, y, p, v in zip(
                    batch.t_us.tolist(),
                    batch.x.tolist(),
                    batch.y.tolist(),
                    batch.polarity.tolist(),
                    batch.provenance.tolist(),
                )
            )
        else:
            rows = (
                f"{t},{x},{y},{p}\n"
                for t, x, y, p in zip(
                    batch.t_us.tolist(),
                    batch.x.tolist(),
                    batch.y.tolist(),
                    batch.polarity.tolist(),
                )
            )
        self._fh.writelines(rows)


def read_events_csv(fh: IO[str]) -> EventBatch:
    header = fh.readline().strip().split(",")
    has_prov = "provenance" in header
    t, x, y, p, v = [], [], [], [], []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        t.append(int(parts[0]))
        x.append(int(parts[1]))
        y.append(int(parts[2]))
        p.append(int(parts[3]))
        v.append(PROVENANCE_CODES[parts[4]] if has_prov else 0)
    return EventBatch(
        t_us=np.array(t, np.int64),
        x=np.array(x, np.int32),
        y=np.array(y, np.int32),
        polarity=np.array(p, np.int8),
        provenance=np.array(v, np.int8),
    )


class EventBinaryWriter:
    def __init__(self, fh: IO[bytes], provenance: bool = False):
        self._fh = fh
        self.provenance = provenance
        fh.write(BINARY_MAGIC)
        fh.write(bytes([1 if provenance else 0]))

    def write(self, batch: EventBatch) -> None:
        n = len(batch)
        if n == 0:
            return
        flags = (batch.polarity.astype(np.uint8) & 1) | (
            (batch.provenance.astype(np.uint8) & 3) << 1
        )
        rec = np.zeros(
            n, dtype=np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("f", "u1")])
        )
        rec["t"] = batch.t_us.astype(np.uint32)
        rec["x"] = batch.x.astype(np.uint16)
        rec["y"] = batch.y.astype(np.uint16)
        rec["f"] = flags
        self._fh.write(rec.tobytes())


def read_events_binary(fh: IO[bytes]) -> EventBatch:
    magic = fh.read(len(BINARY_MAGIC))
    if magic != BINARY_MAGIC:
        raise ValueError("not an event stream file (bad magic)")
    fh.read(1)  # provenance flag byte; records carry the bits either way
    raw = fh.read()
    rec = np.frombuffer(
        raw, dtype=np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("f", "u1")])
    )
    return EventBatch(
        t_us=rec["t"].astype(np.int64),
        x=rec["x"].astype(np.int32),
        y=rec["y"].astype(np.int32),
        polarity=(rec["f"] & 1).astype(np.int8),
        provenance=((rec["f"] >> 1) & 3).astype(np.int8),
    )


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    return repr(float(value))


class TelemetryWriter:
    def __init__(self, fh: IO[str]):
        self._w = csv.writer(fh)
        self._w.writerow(TELEMETRY_COLUMNS)

    def write(self, sample: RateSample, tweaks, controller_states: str) -> None:
        self._w.writerow(
            [
                _fmt(sample.t),
                _fmt(sample.r_input_hz),
                _fmt(sample.r_signal_hz),
                _fmt(sample.r_noise_hz),
                _fmt(sample.r_noise_per_pixel_hz),
                _fmt(sample.r_sn),
                _fmt(tweaks.threshold_tweak),
                _fmt(tweaks.bandwidth_tweak),
                _fmt(tweaks.refractory_tweak),
                controller_states,
            ]
        )


class ActionsWriter:
    def __init__(self, fh: IO[str]):
        self._w = csv.writer(fh)
        self._w.writerow(ACTION_COLUMNS)

    def write(self, action: ControlAction) -> None:
        self._w.writerow(
            [
                _fmt(action.t),
                action.target,
                _fmt(action.delta),
                _fmt(action.resulting_tweak),
                "" if action.trigger_rate != action.trigger_rate else _fmt(action.trigger_rate),
            ]
        )


def read_telemetry(fh: IO[str]) -> list[dict]:
    """Telemetry rows as dicts with floats (r_sn None when blank)."""
    reader = csv.DictReader(fh)
    rows = []
    for raw in reader:
        row: dict = {}
        for key, val in raw.items():
            if key == "controller_states":
                row[key] = val
            elif val == "":
                row[key] = None
            else:
                row[key] = float(val)
        rows.append(row)
    return rows
