"""Semi-automatic sentence/time annotation from descriptions and activity labels.

Descriptions are split into sub-sentences, each prefixed with the
description's subject, then matched to activity annotations by keyword.
Consecutive matched sentences are joined into complex queries.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .data import Dataset, SentenceAnnotation, Video, load_videos
from .errors import DataError
from .geometry import Interval

DEFAULT_CONJUNCTIONS = ("then", "while", "after", "and", "but")

_TOKEN = re.compile(r"[A-Za-z0-9']+")


@dataclass(frozen=True)
class ActivityAnnotation:
    video_id: str
    category: str
    keywords: tuple[str, ...]
    span: Interval

    def __post_init__(self):
        if not self.keywords:
            raise ValueError(f"activity {self.category!r} in {self.video_id!r} has no keywords")


@dataclass(frozen=True)
class ComplexQuery:
    video_id: str
    text: str
    span: Interval
    components: tuple[SentenceAnnotation, ...]
    embedding_ref: str

    def __post_init__(self):
        if len(self.components) < 2:
            raise ValueError("a complex query needs at least two components")


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _starts_with(fragment: str, subject: str) -> bool:
    head = tokens(fragment)[: len(tokens(subject))]
    return bool(head) and head == tokens(subject)


def decompose(
    description: str, subject: str, conjunctions: Sequence[str] = DEFAULT_CONJUNCTIONS
) -> list[str]:
    """Split on commas, periods and conjunction words; prefix the subject.

    Fragments of fewer than two tokens are dropped.
    """
    pieces = re.split(r"[,.]", description)
    if conjunctions:
        conj = re.compile(r"\b(?:" + "|".join(re.escape(c) for c in conjunctions) + r")\b", re.IGNORECASE)
        pieces = [p for piece in pieces for p in conj.split(piece)]
    out = []
    for piece in pieces:
        piece = " ".join(piece.split())
        if len(piece.split()) < 2:
            continue
        if subject and not _starts_with(piece, subject):
            piece = f"{subject} {piece}"
        out.append(piece)
    return out


def _matches(keyword: str, words: list[str], lowered: str) -> bool:
    if " " in keyword:
        return keyword in lowered
    return any(keyword in w for w in words)


def match_keywords(
    sub_sentences: Iterable[str],
    activities: Sequence[ActivityAnnotation],
    ref_prefix: str | None = None,
    start_index: int = 0,
) -> list[SentenceAnnotation]:
    """Give each sub-sentence the span of the activity whose keywords it contains.

    All of an activity's keywords must appear (as substrings of tokens).  When
    several activities match, the one with the most matched keyword
    characters wins, then the earliest span.
    """
    out = []
    k = start_index
    for text in sub_sentences:
        words = tokens(text)
        lowered = text.lower()
        best = None
        best_key = None
        for act in activities:
            if all(_matches(kw.lower(), words, lowered) for kw in act.keywords):
                key = (-sum(len(kw) for kw in act.keywords), act.span.start, act.span.end)
                if best_key is None or key < best_key:
                    best, best_key = act, key
        if best is None:
            continue
        prefix = ref_prefix if ref_prefix is not None else best.video_id
        out.append(SentenceAnnotation(best.video_id, text, best.span, f"{prefix}#{k}"))
        k += 1
    return out


def build_complex(annotations: Sequence[SentenceAnnotation], video_length: float) -> list[ComplexQuery]:
    """Every run of >= 2 consecutive annotations spanning < half the video."""
    ordered = sorted(annotations, key=lambda a: (a.span.start, a.span.end))
    out = []
    limit = video_length / 2.0
    for i in range(len(ordered)):
        end = ordered[i].span.end
        for j in range(i + 1, len(ordered)):
            end = max(end, ordered[j].span.end)
            span = Interval(ordered[i].span.start, end)
            if not span.length < limit:
                break
            run = tuple(ordered[i : j + 1])
            vid = run[0].video_id
            out.append(
                ComplexQuery(vid, " ".join(a.text for a in run), span, run, f"{vid}#c{len(out)}")
            )
    return out


# ------------------------------------------------------------------- files


def read_descriptions(path: str | Path) -> list[tuple[str, str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected video_id, subject, description")
        rows.append((parts[0], parts[1], parts[2]))
    return rows


def read_activities(path: str | Path, videos: dict[str, Video]) -> list[ActivityAnnotation]:
    """Activities file with times in seconds, converted to frames."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields")
        vid, category, kw, s, e = parts
        if vid not in videos:
            raise DataError(f"{path}:{lineno}: unknown video id {vid!r}")
        fps = videos[vid].frame_rate
        keywords = tuple(k.strip().lower() for k in kw.split(",") if k.strip())
        try:
            span = Interval(round(float(s) * fps, 6), round(float(e) * fps, 6))
            out.append(ActivityAnnotation(vid, category, keywords, span))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if span.end > videos[vid].length:
            raise DataError(f"{path}:{lineno}: activity ends after the video")
    return out


def build_annotations(
    descriptions: Sequence[tuple[str, str, str]],
    activities: Sequence[ActivityAnnotation],
    videos: dict[str, Video],
    conjunctions: Sequence[str] = DEFAULT_CONJUNCTIONS,
) -> Dataset:
    per_video: dict[str, list[SentenceAnnotation]] = {vid: [] for vid in videos}
    for vid, subject, text in descriptions:
        if vid not in videos:
            raise DataError(f"description for unknown video {vid!r}")
        acts = [a for a in activities if a.video_id == vid]
        found = match_keywords(decompose(text, subject, conjunctions), acts, start_index=len(per_video[vid]))
        per_video[vid].extend(found)
    dataset = Dataset(dict(videos), [a for vid in videos for a in per_video[vid]])
    for vid, video in videos.items():
        dataset.complex_queries.extend(build_complex(per_video[vid], video.length))
    return dataset


def annotate_files(
    descriptions_path: str | Path,
    activities_path: str | Path,
    videos_path: str | Path,
    conjunctions: Sequence[str] = DEFAULT_CONJUNCTIONS,
) -> Dataset:
    videos = load_videos(videos_path)
    return build_annotations(
        read_descriptions(descriptions_path), read_activities(activities_path, videos), videos, conjunctions
    )
