"""Per-frame measurement-rate controllers and a stream simulator.

A controller looks at one scalar per frame and decides how many rows of the
measurement matrix the *next* frame is sensed with.  The rate is always kept
inside the trained range ``[k_min, m_max]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, RangeError
from .evaluation import psnr_unit, reconstruct_image
from .nn import Network
from .sensing import MeasurementMatrix


@dataclass(frozen=True)
class Bounds:
    k_min: int
    m_max: int

    def __post_init__(self):
        if not 1 <= self.k_min <= self.m_max:
            raise RangeError(f"bad bounds [{self.k_min}, {self.m_max}]")

    def clamp(self, r: int) -> int:
        return min(max(int(r), self.k_min), self.m_max)


@dataclass(frozen=True)
class LinearPolicy:
    """Signal-free schedule from ``r_start`` on frame 0 to ``r_end`` on frame ``T-1``."""

    bounds: Bounds
    r_start: int
    r_end: int
    total_frames: int

    def __post_init__(self):
        if self.total_frames < 1:
            raise RangeError("total_frames must be at least 1")

    def rate_at(self, t: int) -> int:
        if self.total_frames == 1:
            x = float(self.r_start)
        else:
            x = self.r_start + (self.r_end - self.r_start) * t / (self.total_frames - 1)
        # halves round up so the schedule never depends on float parity
        return self.bounds.clamp(math.floor(x + 0.5))

    def initial_rate(self) -> int:
        return self.rate_at(0)


@dataclass(frozen=True)
class FrameDiffPolicy:
    """Fewer rows when successive frames look alike, more when they differ."""

    bounds: Bounds
    alpha: float = 0.15
    beta: float = 0.3
    delta_rows: int = 3

    def __post_init__(self):
        if not self.alpha < self.beta:
            raise RangeError(f"need alpha < beta, got {self.alpha}, {self.beta}")
        if self.delta_rows < 1:
            raise RangeError("delta_rows must be >= 1")

    def initial_rate(self) -> int:
        return self.bounds.m_max


@dataclass(frozen=True)
class ConfidencePolicy:
    """More rows when the downstream confidence drops below ``gamma``."""

    bounds: Bounds
    gamma: float = 0.3
    delta_rows: int = 3

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise RangeError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.delta_rows < 1:
            raise RangeError("delta_rows must be >= 1")

    def initial_rate(self) -> int:
        return self.bounds.m_max


@dataclass(frozen=True)
class AdaptationState:
    current_r: int
    frame_index: int = 0
    last_frame: np.ndarray | None = field(default=None, compare=False, repr=False)


def initial_state(policy) -> AdaptationState:
    return AdaptationState(policy.initial_rate(), 0, None)


def next_rate(policy, state: AdaptationState, signal=None) -> AdaptationState:
    """Rate for the frame after ``state.frame_index``; pure in its arguments.

    ``signal`` is ignored by :class:`LinearPolicy`, is a normalized frame
    difference (or ``None`` when there is no previous frame) for
    :class:`FrameDiffPolicy`, and a confidence in [0, 1] for
    :class:`ConfidencePolicy`.
    """
    t = state.frame_index + 1
    r = state.current_r
    if isinstance(policy, LinearPolicy):
        r = policy.rate_at(t)
    elif isinstance(policy, FrameDiffPolicy):
        if signal is not None:
            d = float(signal)
            if not (d >= 0.0 and math.isfinite(d)):
                raise RangeError(f"frame difference must be finite and >= 0, got {signal}")
            if d < policy.alpha:
                r -= policy.delta_rows
            elif d > policy.beta:
                r += policy.delta_rows
    elif isinstance(policy, ConfidencePolicy):
        c = float(signal) if signal is not None else math.nan
        if not 0.0 <= c <= 1.0:
            raise RangeError(f"confidence must lie in [0, 1], got {signal}")
        r = r + policy.delta_rows if c < policy.gamma else r - policy.delta_rows
    else:
        raise TypeError(f"unknown policy {type(policy).__name__}")
    return AdaptationState(policy.bounds.clamp(r), t, state.last_frame)


def frame_difference(current, previous) -> float:
    """``||f_t - f_{t-1}|| / ||f_{t-1}||`` on [0, 1] frames (inf after a black frame)."""
    cur = np.asarray(current, dtype=np.float64)
    prev = np.asarray(previous, dtype=np.float64)
    if cur.shape != prev.shape:
        raise DimensionError(f"frame shapes differ: {cur.shape} vs {prev.shape}")
    num = float(np.linalg.norm(cur - prev))
    den = float(np.linalg.norm(prev))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


@dataclass(frozen=True)
class TraceRow:
    frame: int
    r: int
    mr: float
    psnr: float


@dataclass
class StreamTrace:
    rows: list[TraceRow]
    n: int

    @property
    def rates(self) -> list[int]:
        return [row.r for row in self.rows]

    @property
    def avg_mr(self) -> float:
        return float(np.mean([row.mr for row in self.rows]))


def simulate_stream(frames, policy, model: Network, phi: MeasurementMatrix, confidences=None,
                    use_ground_truth: bool = False) -> StreamTrace:
    """Sense, reconstruct and score each frame, then pick the rate for the next.

    Frame ``t`` is always sensed at the rate decided after frame ``t-1``.
    Frame differences use reconstructions unless ``use_ground_truth``.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    if isinstance(policy, ConfidencePolicy):
        if confidences is None or len(confidences) != len(frames):
            got = None if confidences is None else len(confidences)
            raise DimensionError(f"need one confidence per frame ({len(frames)}), got {got}")
    bounds = policy.bounds
    if bounds.k_min < phi.k_min or bounds.m_max > phi.m_max:
        raise RangeError(f"policy bounds [{bounds.k_min}, {bounds.m_max}] exceed the matrix range "
                         f"[{phi.k_min}, {phi.m_max}]")

    state = initial_state(policy)
    rows = []
    for t, frame in enumerate(frames):
        r = state.current_r
        recon = reconstruct_image(model, phi, frame, r)
        rows.append(TraceRow(t, r, phi.mr(r), psnr_unit(frame, recon)))
        if t == len(frames) - 1:
            break
        signal = None
        seen = np.asarray(frame, dtype=np.float64) if use_ground_truth else recon
        if isinstance(policy, FrameDiffPolicy) and state.last_frame is not None:
            signal = frame_difference(seen, state.last_frame)
        elif isinstance(policy, ConfidencePolicy):
            signal = confidences[t]
        state = replace(next_rate(policy, state, signal), last_frame=seen)
    return StreamTrace(rows, phi.n)


def _fmt(x) -> str:
    return f"{x:.6g}"


def write_trace_csv(trace: StreamTrace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "r", "mr", "psnr"])
        for row in trace.rows:
            w.writerow([row.frame, row.r, _fmt(row.mr), _fmt(row.psnr)])


def read_confidences(path) -> list[float]:
    """Single-column CSV of per-frame confidences; a non-numeric first line is a header."""
    values = []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec or not rec[0].strip():
                continue
            try:
                values.append(float(rec[0]))
            except ValueError:
                if i == 0:
                    continue
                raise RangeError(f"{path}: line {i + 1}: not a number: {rec[0]!r}") from None
    return values
