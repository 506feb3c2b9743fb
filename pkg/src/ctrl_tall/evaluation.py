"""Sliding-window inference, R@n/IoU=m recall, complex-query fusion, detection mAP."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import (
    TEST_OVERLAP,
    TEST_SCALES_CHARADES,
    ClipCandidate,
    ClipInputs,
    Dataset,
    FeatureProvider,
    Video,
    clip_candidates,
    clip_inputs,
)
from .geometry import Interval, apply_offsets, iou, nms
from .model import K_CLASS, CtrlModel


@dataclass(frozen=True)
class RankedEntry:
    interval: Interval
    score: float
    source: Interval


@dataclass
class QueryResult:
    query_id: str
    entries: list[RankedEntry] = field(default_factory=list)

    def top(self, n: int) -> list[RankedEntry]:
        return self.entries[:n]


@dataclass
class MetricReport:
    n_values: tuple[int, ...]
    m_values: tuple[float, ...]
    recall: dict[tuple[int, float], float]
    count: int

    def __getitem__(self, key: tuple[int, float]) -> float:
        return self.recall[key]

    def check_monotone(self) -> None:
        ns, ms = sorted(self.n_values), sorted(self.m_values)
        for m in ms:
            for a, b in zip(ns, ns[1:]):
                if self.recall[(a, m)] > self.recall[(b, m)]:
                    raise AssertionError(f"R@{a} > R@{b} at IoU={m}")
        for n in ns:
            for a, b in zip(ms, ms[1:]):
                if self.recall[(n, a)] < self.recall[(n, b)]:
                    raise AssertionError(f"R@{n} at IoU={a} below IoU={b}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("n,m,recall\n")
        for n in sorted(self.n_values):
            for m in sorted(self.m_values, reverse=True):
                buf.write(f"{n},{m!r},{self.recall[(n, m)]!r}\n")
        return buf.getvalue()

    def format_table(self, label: str = "CTRL") -> str:
        cols = [(n, m) for n in sorted(self.n_values) for m in sorted(self.m_values, reverse=True)]
        head = ["Method"] + [f"R@{n} IoU={m:g}" for n, m in cols]
        row = [label] + [f"{100.0 * self.recall[c]:.2f}" for c in cols]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        fmt = " | ".join("{:<%d}" % w for w in widths)
        return "\n".join([fmt.format(*head), "-+-".join("-" * w for w in widths), fmt.format(*row)]) + (
            f"\n(queries: {self.count})"
        )


@dataclass
class VideoClips:
    """Test windows of one video with their precomputed features."""

    video: Video
    clips: list[ClipCandidate]
    inputs: ClipInputs


def build_video_clips(
    dataset: Dataset,
    provider: FeatureProvider,
    context_n: int,
    scales: Sequence[float] = TEST_SCALES_CHARADES,
    overlap: float = TEST_OVERLAP,
) -> dict[str, VideoClips]:
    out = {}
    for vid in sorted(dataset.videos):
        video = dataset.videos[vid]
        clips = clip_candidates(video, scales, overlap)
        inputs = clip_inputs(provider, dataset.videos, [(vid, c.span) for c in clips], context_n)
        out[vid] = VideoClips(video, clips, inputs)
    return out


def _rank(scores: np.ndarray, spans: Sequence[Interval]) -> np.ndarray:
    starts = np.array([s.start for s in spans])
    lengths = np.array([s.length for s in spans])
    # lexsort uses the last key as primary
    return np.lexsort((lengths, starts, -scores))


def localize(
    model: CtrlModel,
    query_embedding,
    video_clips: VideoClips,
    top_n: int,
    apply_regression: bool,
    query_id: str = "",
) -> QueryResult:
    """Rank every window for a query, then optionally refine the top ``top_n``."""
    if not video_clips.clips:
        return QueryResult(query_id, [])
    scores, offsets = model.score_clips(query_embedding, video_clips.inputs)
    spans = [c.span for c in video_clips.clips]
    kind = model.config.offset_kind
    length = video_clips.video.length
    entries = []
    for idx in _rank(scores, spans)[:top_n]:
        src = spans[idx]
        refined = apply_offsets(kind, src, (offsets[idx, 0], offsets[idx, 1]), length) if apply_regression else src
        entries.append(RankedEntry(refined, float(scores[idx]), src))
    return QueryResult(query_id, entries)


def recall_at(
    results: Sequence[QueryResult],
    ground_truths: Mapping[str, Interval],
    n_values: Sequence[int],
    m_values: Sequence[float],
) -> MetricReport:
    """Fraction of queries with any top-n interval at IoU > m."""
    ids = [r.query_id for r in results]
    if len(set(ids)) != len(ids) or set(ids) != set(ground_truths):
        raise ValueError("query ids of results and ground truths do not match")
    n_values, m_values = tuple(n_values), tuple(m_values)
    hits = {(n, m): 0 for n in n_values for m in m_values}
    for r in results:
        gt = ground_truths[r.query_id]
        overlaps = [iou(e.interval, gt) for e in r.entries]
        for n in n_values:
            best = max(overlaps[:n], default=0.0)
            for m in m_values:
                if best > m:
                    hits[(n, m)] += 1
    count = len(results)
    report = MetricReport(
        n_values, m_values, {k: (v / count if count else 0.0) for k, v in hits.items()}, count
    )
    report.check_monotone()
    return report


def fuse_complex(sub_results: Sequence[QueryResult], query_id: str | None = None) -> QueryResult:
    """Rank-aligned late fusion: mean score, min start, max end."""
    if len(sub_results) < 2:
        raise ValueError("fusion needs at least two sub-query results")
    for r in sub_results:
        if not r.entries:
            raise ValueError(f"sub-query {r.query_id!r} has no ranked entries")
    depth = min(len(r.entries) for r in sub_results)
    fused = []
    for k in range(depth):
        rank_k = [r.entries[k] for r in sub_results]
        fused.append(
            RankedEntry(
                Interval(min(e.interval.start for e in rank_k), max(e.interval.end for e in rank_k)),
                float(np.mean([e.score for e in rank_k])),
                Interval(min(e.source.start for e in rank_k), max(e.source.end for e in rank_k)),
            )
        )
    fused.sort(key=lambda e: -e.score)
    qid = query_id if query_id is not None else "+".join(r.query_id for r in sub_results)
    return QueryResult(qid, fused)


# ---------------------------------------------------------------- harness


def evaluate_annotations(
    model: CtrlModel,
    dataset: Dataset,
    sentences: FeatureProvider,
    clips_by_video: Mapping[str, VideoClips],
    n_values: Sequence[int] = (1, 5),
    m_values: Sequence[float] = (0.1, 0.3, 0.5),
    apply_regression: bool = True,
) -> tuple[list[QueryResult], MetricReport]:
    top = max(n_values)
    results, gts = [], {}
    for ann in dataset.annotations:
        qid = ann.embedding_ref
        results.append(
            localize(model, sentences.lookup(qid), clips_by_video[ann.video_id], top, apply_regression, qid)
        )
        gts[qid] = ann.span
    return results, recall_at(results, gts, n_values, m_values)


def evaluate_complex(
    model: CtrlModel,
    dataset: Dataset,
    sentences: FeatureProvider,
    clips_by_video: Mapping[str, VideoClips],
    n_values: Sequence[int] = (1, 5),
    m_values: Sequence[float] = (0.5, 0.7),
    apply_regression: bool = True,
    fusion: bool = False,
) -> tuple[list[QueryResult], MetricReport]:
    """Complex queries either as one embedding or by fusing their components."""
    top = max(n_values)
    results, gts = [], {}
    for q in dataset.complex_queries:
        clips = clips_by_video[q.video_id]
        if fusion:
            subs = [
                localize(model, sentences.lookup(c.embedding_ref), clips, top, apply_regression, c.embedding_ref)
                for c in q.components
            ]
            results.append(fuse_complex(subs, q.embedding_ref))
        else:
            results.append(localize(model, sentences.lookup(q.embedding_ref), clips, top, apply_regression, q.embedding_ref))
        gts[q.embedding_ref] = q.span
    return results, recall_at(results, gts, n_values, m_values)


def mean_top1_iou(results: Sequence[QueryResult], ground_truths: Mapping[str, Interval], source: bool = False) -> float:
    vals = []
    for r in results:
        if r.entries:
            e = r.entries[0]
            vals.append(iou(e.source if source else e.interval, ground_truths[r.query_id]))
        else:
            vals.append(0.0)
    return float(np.mean(vals)) if vals else 0.0


def format_results(results: Sequence[QueryResult], video_ids: Mapping[str, str], fps: Mapping[str, float]) -> str:
    """STA-style lines (seconds) with rank and score, for inspection."""
    lines = []
    for r in results:
        vid = video_ids[r.query_id]
        for rank, e in enumerate(r.entries, 1):
            lines.append(
                f"{vid}\t{e.interval.start / fps[vid]!r}\t{e.interval.end / fps[vid]!r}\t{r.query_id}\t{rank}\t{e.score!r}"
            )
    return "".join(line + "\n" for line in lines)


# --------------------------------------------------------------- detection


@dataclass(frozen=True)
class Detection:
    video_id: str
    interval: Interval
    score: float


def detect(
    model: CtrlModel, video_clips: VideoClips, nms_delta: float = 0.2, eval_tiou: float = 0.5
) -> dict[int, list[Detection]]:
    """Per-class refined windows scoring above background, after NMS at eval_tiou - nms_delta."""
    if model.config.head_mode != K_CLASS:
        raise ValueError("detect needs a model in k_class head mode")
    k = model.config.num_classes
    out: dict[int, list[Detection]] = {c: [] for c in range(k)}
    if not video_clips.clips:
        return out
    logits, offsets = model.classification_forward(video_clips.inputs)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    threshold = nms_threshold(eval_tiou, nms_delta)
    length = video_clips.video.length
    kind = model.config.offset_kind
    for c in range(k):
        scored = []
        for h, clip in enumerate(video_clips.clips):
            if prob[h, c] <= prob[h, k]:
                continue
            refined = apply_offsets(kind, clip.span, (offsets.data[h, 2 * c], offsets.data[h, 2 * c + 1]), length)
            scored.append((refined, float(prob[h, c])))
        out[c] = [Detection(video_clips.video.id, iv, s) for iv, s in nms(scored, threshold)]
    return out


def nms_threshold(eval_tiou: float = 0.5, nms_delta: float = 0.2) -> float:
    return max(0.0, eval_tiou - nms_delta)


def average_precision(
    detections: Sequence[Detection], ground_truths: Sequence[tuple[str, Interval]], tiou: float = 0.5
) -> float:
    """All-point interpolated AP with greedy one-to-one matching at IoU > tiou."""
    if not ground_truths:
        return 0.0
    taken = [False] * len(ground_truths)
    flags = []
    for det in sorted(detections, key=lambda d: -d.score):
        best, best_j = tiou, -1
        for j, (vid, gt) in enumerate(ground_truths):
            if taken[j] or vid != det.video_id:
                continue
            o = iou(det.interval, gt)
            if o > best:
                best, best_j = o, j
        if best_j >= 0:
            taken[best_j] = True
        flags.append(best_j >= 0)
    if not flags:
        return 0.0
    tp = np.cumsum(flags, dtype=np.float64)
    precision = tp / np.arange(1, len(flags) + 1)
    recall = tp / len(ground_truths)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at_iou(
    detections: Mapping[int, Sequence[Detection]],
    ground_truths: Mapping[int, Sequence[tuple[str, Interval]]],
    tiou: float = 0.5,
) -> float:
    classes = [c for c, g in ground_truths.items() if g]
    if not classes:
        return 0.0
    return float(np.mean([average_precision(detections.get(c, ()), ground_truths[c], tiou) for c in classes]))
