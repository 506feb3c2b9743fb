"""Interval arithmetic: overlap measures, sliding windows, offsets, NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

PARAMETERIZED = "parameterized"
NON_PARAMETERIZED = "non_parameterized"
OFFSET_KINDS = (PARAMETERIZED, NON_PARAMETERIZED)

# Bound on the predicted log length ratio so exp() cannot overflow.
MAX_LOG_RATIO = 20.0


@dataclass(frozen=True, slots=True)
class Interval:
    """Half-open time span ``[start, end)`` in frames."""

    start: float
    end: float

    def __post_init__(self):
        # plain floats keep reprs and text output free of numpy scalar types
        object.__setattr__(self, "start", float(self.start))
        object.__setattr__(self, "end", float(self.end))
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"non-finite interval [{self.start}, {self.end}]")
        if not self.start < self.end:
            raise ValueError(f"interval needs start < end, got [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def shifted(self, delta: float) -> "Interval":
        return Interval(self.start + delta, self.end + delta)

    def contains(self, other: "Interval") -> bool:
        return self.start <= other.start and other.end <= self.end


@dataclass(frozen=True, slots=True)
class OffsetPair:
    """Regression target or prediction for one candidate.

    ``first``/``second`` are (center, log-length) offsets for the
    parameterized kind and (start, end) offsets otherwise.
    """

    kind: str
    first: float
    second: float

    def __post_init__(self):
        if self.kind not in OFFSET_KINDS:
            raise ValueError(f"unknown offset kind {self.kind!r}")
        if self.kind == PARAMETERIZED and not math.isfinite(self.second):
            raise ValueError("parameterized length offset must be finite")

    def as_tuple(self) -> tuple[float, float]:
        return (self.first, self.second)


def intersection(a: Interval, b: Interval) -> float:
    return max(0.0, min(a.end, b.end) - max(a.start, b.start))


def iou(a: Interval, b: Interval) -> float:
    inter = intersection(a, b)
    if inter <= 0.0:
        return 0.0
    return inter / (a.length + b.length - inter)


def niol(clip: Interval, annotation: Interval) -> float:
    """Fraction of ``clip`` not covered by ``annotation``."""
    return (clip.length - intersection(clip, annotation)) / clip.length


def _window_step(length: float, overlap: float) -> int:
    return max(1, int(math.floor(length * (1.0 - overlap) + 0.5)))


def windows_by_scale(
    video_length: float, window_lengths: Sequence[float], overlap: float
) -> list[tuple[float, Interval]]:
    """(scale, window) pairs before cross-scale deduplication.

    Each scale starts at 0 and advances by ``round(L * (1 - overlap))``; the
    first window reaching the video end is clamped and ends that scale.
    """
    if not window_lengths:
        raise ValueError("window_lengths is empty")
    if not video_length > 0:
        raise ValueError(f"video_length must be positive, got {video_length}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    out = []
    for length in window_lengths:
        if length <= 0:
            raise ValueError(f"window length must be positive, got {length}")
        step = _window_step(length, overlap)
        start = 0
        while start < video_length:
            end = min(start + length, video_length)
            out.append((float(length), Interval(float(start), float(end))))
            if start + length >= video_length:
                break
            start += step
    return out


def sliding_windows(
    video_length: float, window_lengths: Sequence[float], overlap: float
) -> list[Interval]:
    """Deduplicated multi-scale windows ordered by (length, start)."""
    unique = {w for _, w in windows_by_scale(video_length, window_lengths, overlap)}
    return sorted(unique, key=lambda w: (w.length, w.start))


def encode_offsets(kind: str, candidate: Interval, ground_truth: Interval) -> OffsetPair:
    if kind == PARAMETERIZED:
        return OffsetPair(
            kind,
            (ground_truth.center - candidate.center) / candidate.length,
            math.log(ground_truth.length / candidate.length),
        )
    if kind == NON_PARAMETERIZED:
        return OffsetPair(kind, ground_truth.start - candidate.start, ground_truth.end - candidate.end)
    raise ValueError(f"unknown offset kind {kind!r}")


def decode_offsets(kind: str, candidate: Interval, first: float, second: float) -> tuple[float, float]:
    """Unclamped (start, end) implied by offsets; may be inverted."""
    if kind == PARAMETERIZED:
        center = candidate.center + first * candidate.length
        length = candidate.length * math.exp(min(max(second, -MAX_LOG_RATIO), MAX_LOG_RATIO))
        return center - 0.5 * length, center + 0.5 * length
    if kind == NON_PARAMETERIZED:
        return candidate.start + first, candidate.end + second
    raise ValueError(f"unknown offset kind {kind!r}")


def apply_offsets(
    kind: str, candidate: Interval, offsets: OffsetPair | tuple[float, float], video_length: float
) -> Interval:
    """Inverse of :func:`encode_offsets`, clamped to ``[0, video_length]``.

    A prediction that collapses under clamping becomes the unit interval at
    the boundary nearest to it.
    """
    if isinstance(offsets, OffsetPair):
        first, second = offsets.first, offsets.second
    else:
        first, second = offsets
    s, e = decode_offsets(kind, candidate, first, second)
    cs = min(max(s, 0.0), video_length)
    ce = min(max(e, 0.0), video_length)
    if cs < ce:
        return Interval(cs, ce)
    unit = min(1.0, video_length)
    if min(s, e) >= video_length:
        return Interval(video_length - unit, video_length)
    if max(s, e) <= 0.0:
        return Interval(0.0, unit)
    # inverted prediction inside the video: centre a unit span on its midpoint
    mid = min(max(0.5 * (s + e), 0.5 * unit), video_length - 0.5 * unit)
    return Interval(mid - 0.5 * unit, mid + 0.5 * unit)


def _nms_key(item: tuple[Interval, float]):
    interval, score = item
    return (-score, interval.start, interval.length)


def nms(scored: Iterable[tuple[Interval, float]], threshold: float) -> list[tuple[Interval, float]]:
    """Greedy suppression of any candidate with IoU > ``threshold`` to a kept one."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    kept: list[tuple[Interval, float]] = []
    for item in sorted(scored, key=_nms_key):
        if all(iou(item[0], k[0]) <= threshold for k in kept):
            kept.append(item)
    return kept
