"""Datasets, feature providers, training-sample assignment and batching."""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import DataError, DimensionError
from .geometry import (
    NON_PARAMETERIZED,
    PARAMETERIZED,
    Interval,
    OffsetPair,
    encode_offsets,
    iou,
    niol,
    windows_by_scale,
)

if TYPE_CHECKING:
    from .annotation import ComplexQuery

logger = logging.getLogger(__name__)

TRAIN_SCALES = (64, 128, 256, 512)
TRAIN_OVERLAP = 0.8
TEST_SCALES_TACOS = (128,)
TEST_SCALES_CHARADES = (128, 256)
TEST_OVERLAP = 0.8

FEATURE_MAGIC = b"CTRLFEAT"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class Video:
    id: str
    length: float
    frame_rate: float = 1.0

    def __post_init__(self):
        if not self.length > 0:
            raise DataError(f"video {self.id!r} has non-positive length {self.length}")
        if not self.frame_rate > 0:
            raise DataError(f"video {self.id!r} has non-positive frame rate {self.frame_rate}")


@dataclass(frozen=True)
class SentenceAnnotation:
    video_id: str
    text: str
    span: Interval
    embedding_ref: str


@dataclass(frozen=True)
class ClipCandidate:
    video_id: str
    span: Interval
    scale: float
    feature_ref: str


@dataclass(frozen=True)
class TrainingSample:
    sentence: SentenceAnnotation
    clip: ClipCandidate
    gt_offsets_param: OffsetPair
    gt_offsets_nonparam: OffsetPair

    def offsets(self, kind: str) -> OffsetPair:
        return self.gt_offsets_param if kind == PARAMETERIZED else self.gt_offsets_nonparam


@dataclass
class Dataset:
    videos: dict[str, Video]
    annotations: list[SentenceAnnotation]
    complex_queries: list["ComplexQuery"] = field(default_factory=list)

    def annotations_for(self, video_id: str) -> list[SentenceAnnotation]:
        return [a for a in self.annotations if a.video_id == video_id]

    def subset(self, video_ids: Iterable[str]) -> "Dataset":
        keep = set(video_ids)
        return Dataset(
            {k: v for k, v in self.videos.items() if k in keep},
            [a for a in self.annotations if a.video_id in keep],
            [q for q in self.complex_queries if q.video_id in keep],
        )


# ------------------------------------------------------------------ keys


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def clip_key(video_id: str, span: Interval) -> str:
    return f"{video_id}|{_num(span.start)}|{_num(span.end)}"


def parse_clip_key(key: str) -> tuple[str, Interval]:
    try:
        video_id, s, e = key.rsplit("|", 2)
        return video_id, Interval(float(s), float(e))
    except ValueError as exc:
        raise KeyError(f"malformed clip key {key!r}") from exc


def context_spans(span: Interval, video_length: float, context_n: int):
    """Pre/post context windows of the same length, clipped to the video.

    Entries are None where a context window lies entirely outside the video.
    """
    pre, post = [], []
    for q in range(1, context_n + 1):
        for sign, bucket in ((-1, pre), (1, post)):
            s = span.start + sign * q * span.length
            e = span.end + sign * q * span.length
            s, e = max(s, 0.0), min(e, video_length)
            bucket.append(Interval(s, e) if s < e else None)
    return pre, post


# ------------------------------------------------------------- providers


class FeatureProvider:
    """Maps keys to fixed-width float64 vectors."""

    role: str
    dimension: int

    def lookup(self, key: str) -> np.ndarray:
        raise NotImplementedError

    def keys(self) -> list[str]:
        raise NotImplementedError


def feature_lookup(provider: FeatureProvider, key: str) -> np.ndarray:
    return provider.lookup(key)


class ArrayFeatureProvider(FeatureProvider):
    def __init__(self, role: str, dimension: int, table: dict[str, np.ndarray]):
        self.role = role
        self.dimension = dimension
        self._table = table

    def lookup(self, key: str) -> np.ndarray:
        try:
            return self._table[key]
        except KeyError:
            raise KeyError(f"unknown {self.role} feature key {key!r}") from None

    def keys(self) -> list[str]:
        return list(self._table)


class FileFeatureProvider(ArrayFeatureProvider):
    """Provider backed by a CTRLFEAT file (f32 on disk, f64 in memory)."""

    def __init__(self, path: str | Path, role: str, dimension: int | None = None):
        path = Path(path)
        if not path.exists():
            raise DataError(f"feature file not found: {path}")
        dim, table = read_feature_file(path)
        if dimension is not None and dim != dimension:
            raise DimensionError(f"{path}: feature dimension {dim} but expected {dimension}")
        super().__init__(role, dim, table)
        self.path = path


def write_feature_file(path: str | Path, dimension: int, table: dict[str, np.ndarray]) -> None:
    chunks = [FEATURE_MAGIC, struct.pack("<IIQ", FEATURE_VERSION, dimension, len(table))]
    for key in sorted(table):
        vec = np.asarray(table[key])
        if vec.shape != (dimension,):
            raise DimensionError(f"feature {key!r} has shape {vec.shape}, expected ({dimension},)")
        raw = key.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(vec.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_feature_file(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a CTRLFEAT file")
    version, dim, count = struct.unpack_from("<IIQ", buf, 8)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    pos = 24
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        key = buf[pos : pos + n].decode("utf-8")
        pos += n
        table[key] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
    return dim, table


def _key_seed(seed: int, key: str) -> np.random.Generator:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def _f32(x: np.ndarray) -> np.ndarray:
    # values are kept f32-representable so a feature-file round trip is exact
    return np.asarray(x, dtype=np.float32).astype(np.float64)


class SyntheticVisualProvider(FeatureProvider):
    """Clip features from a latent activity layout plus per-key noise.

    A clip's feature is the prototype of the activity containing the clip's
    midpoint (zeros for background), or with ``mode="coverage"`` the
    coverage-weighted sum of the prototypes of all overlapping activities.
    """

    role = "visual"

    def __init__(
        self,
        layouts: dict[str, list[tuple[Interval, int]]],
        prototypes: np.ndarray,
        noise_sigma: float,
        seed: int,
        mode: str = "midpoint",
    ):
        if mode not in ("midpoint", "coverage"):
            raise ValueError(f"unknown synthetic feature mode {mode!r}")
        self.layouts = layouts
        self.prototypes = prototypes
        self.dimension = prototypes.shape[1]
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.mode = mode
        self._cache: dict[str, np.ndarray] = {}

    def clean_feature(self, video_id: str, span: Interval) -> np.ndarray:
        layout = self.layouts[video_id]
        out = np.zeros(self.dimension)
        if self.mode == "midpoint":
            mid = span.center
            for act_span, cls in layout:
                if act_span.start <= mid < act_span.end:
                    out = self.prototypes[cls].copy()
                    break
        else:
            for act_span, cls in layout:
                inter = max(0.0, min(span.end, act_span.end) - max(span.start, act_span.start))
                if inter > 0:
                    out += (inter / span.length) * self.prototypes[cls]
        return out

    def lookup(self, key: str) -> np.ndarray:
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        video_id, span = parse_clip_key(key)
        if video_id not in self.layouts:
            raise KeyError(f"unknown visual feature key {key!r}")
        vec = self.clean_feature(video_id, span)
        if self.noise_sigma > 0:
            vec = vec + self.noise_sigma * _key_seed(self.seed, key).standard_normal(self.dimension)
        vec = _f32(vec)
        self._cache[key] = vec
        return vec

    def keys(self) -> list[str]:
        return list(self._cache)


# --------------------------------------------------------------- file I/O


def load_videos(path: str | Path) -> dict[str, Video]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"videos file not found: {path}")
    videos: dict[str, Video] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            video = Video(parts[0], float(parts[1]), float(parts[2]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if video.id in videos:
            raise DataError(f"{path}:{lineno}: duplicate video id {video.id!r}")
        videos[video.id] = video
    return videos


def load_annotations(
    annotations_path: str | Path, videos_path: str | Path, strict: bool = True
) -> Dataset:
    """Read STA-format annotations (times in seconds) into a frame-based dataset.

    Lines carrying a ``#complex`` fifth column become complex queries whose
    components are the single annotations of the same video inside the span.
    """
    from .annotation import ComplexQuery

    videos = load_videos(videos_path)
    path = Path(annotations_path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")
    singles: list[SentenceAnnotation] = []
    complex_rows: list[tuple[int, str, str, Interval, str]] = []
    ordinal: dict[str, int] = {}
    complex_ordinal: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 4:
            raise DataError(f"{path}:{lineno}: expected at least 4 tab-separated fields")
        vid, s, e, text = parts[:4]
        extra = parts[4:]
        if vid not in videos:
            raise DataError(f"{path}:{lineno}: unknown video id {vid!r}")
        if not text.strip():
            raise DataError(f"{path}:{lineno}: empty sentence")
        video = videos[vid]
        try:
            start = round(float(s) * video.frame_rate, 6)
            end = round(float(e) * video.frame_rate, 6)
        except ValueError:
            raise DataError(f"{path}:{lineno}: start/end are not numbers") from None
        if not start < end:
            raise DataError(f"{path}:{lineno}: start {s} is not before end {e}")
        if start < 0 or end > video.length:
            if strict:
                raise DataError(
                    f"{path}:{lineno}: span [{start}, {end}] outside video {vid!r} of length {video.length}"
                )
            logger.warning("%s:%d: clamping span [%s, %s] to video %r", path, lineno, start, end, vid)
            start, end = max(start, 0.0), min(end, video.length)
            if not start < end:
                raise DataError(f"{path}:{lineno}: span empty after clamping")
        span = Interval(start, end)
        if extra and extra[0] == "#complex":
            k = complex_ordinal.get(vid, 0)
            complex_ordinal[vid] = k + 1
            ref = extra[1] if len(extra) > 1 and extra[1] else f"{vid}#c{k}"
            complex_rows.append((lineno, vid, text, span, ref))
            continue
        k = ordinal.get(vid, 0)
        ordinal[vid] = k + 1
        ref = extra[0] if extra and extra[0] else f"{vid}#{k}"
        singles.append(SentenceAnnotation(vid, text, span, ref))

    complex_queries = []
    for lineno, vid, text, span, ref in complex_rows:
        parts = sorted(
            (a for a in singles if a.video_id == vid and span.contains(a.span)),
            key=lambda a: (a.span.start, a.span.end),
        )
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: complex query covers fewer than 2 annotations")
        complex_queries.append(ComplexQuery(vid, text, span, tuple(parts), ref))
    return Dataset(videos, singles, complex_queries)


def _sec(frames: float, fps: float) -> str:
    return repr(frames / fps)


def write_videos(path: str | Path, videos: Iterable[Video]) -> None:
    lines = [f"{v.id}\t{_num(v.length)}\t{_num(v.frame_rate)}" for v in videos]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_annotations(path: str | Path, dataset: Dataset) -> None:
    lines = []
    for a in dataset.annotations:
        fps = dataset.videos[a.video_id].frame_rate
        lines.append(
            f"{a.video_id}\t{_sec(a.span.start, fps)}\t{_sec(a.span.end, fps)}\t{a.text}\t{a.embedding_ref}"
        )
    for q in dataset.complex_queries:
        fps = dataset.videos[q.video_id].frame_rate
        lines.append(
            f"{q.video_id}\t{_sec(q.span.start, fps)}\t{_sec(q.span.end, fps)}\t{q.text}\t#complex\t{q.embedding_ref}"
        )
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ------------------------------------------------------------ sampling


def training_windows(video: Video, scales: Sequence[float] = TRAIN_SCALES, overlap: float = TRAIN_OVERLAP):
    return clip_candidates(video, scales, overlap)


def clip_candidates(video: Video, scales: Sequence[float], overlap: float) -> list[ClipCandidate]:
    """Sliding-window candidates, each keyed by its (clamped) interval."""
    seen: dict[Interval, ClipCandidate] = {}
    for scale, span in windows_by_scale(video.length, scales, overlap):
        if span not in seen:
            seen[span] = ClipCandidate(video.id, span, scale, clip_key(video.id, span))
    return sorted(seen.values(), key=lambda c: (c.span.length, c.span.start))


def assign_training_samples(
    clips: Sequence[ClipCandidate],
    annotations: Sequence[SentenceAnnotation],
    iou_min: float = 0.5,
    niol_max: float = 0.2,
) -> list[TrainingSample]:
    """Pair each clip with at most one sentence: IoU > iou_min and nIoL < niol_max.

    Among qualifying sentences the highest IoU wins; ties go to the earlier
    sentence start.
    """
    out = []
    for clip in clips:
        best = None
        best_key = None
        for ann in annotations:
            if ann.video_id != clip.video_id:
                continue
            o = iou(clip.span, ann.span)
            if o > iou_min and niol(clip.span, ann.span) < niol_max:
                key = (-o, ann.span.start)
                if best_key is None or key < best_key:
                    best, best_key = ann, key
        if best is not None:
            out.append(
                TrainingSample(
                    best,
                    clip,
                    encode_offsets(PARAMETERIZED, clip.span, best.span),
                    encode_offsets(NON_PARAMETERIZED, clip.span, best.span),
                )
            )
    return out


def build_training_samples(
    dataset: Dataset, scales: Sequence[float] = TRAIN_SCALES, overlap: float = TRAIN_OVERLAP
) -> list[TrainingSample]:
    samples = []
    for vid in sorted(dataset.videos):
        clips = training_windows(dataset.videos[vid], scales, overlap)
        samples.extend(assign_training_samples(clips, dataset.annotations_for(vid)))
    return samples


def is_false_negative(a: TrainingSample, b: TrainingSample, iou_max: float = 0.5) -> bool:
    """True when pairing a's sentence with b's clip (or vice versa) is really a match."""
    if a.sentence.video_id != b.clip.video_id:
        return False
    return iou(b.clip.span, a.sentence.span) > iou_max or iou(a.clip.span, b.sentence.span) > iou_max


@dataclass(frozen=True)
class Batch:
    indices: tuple[int, ...]
    samples: tuple[TrainingSample, ...]

    def __len__(self) -> int:
        return len(self.indices)


def sample_batch(
    samples: Sequence[TrainingSample],
    batch_size: int = 64,
    rng: np.random.Generator | None = None,
    filter_false_negatives: bool = True,
    max_retries: int | None = None,
) -> Batch:
    """Draw ``batch_size`` distinct samples; row i pairs with column i.

    With the filter on, a drawn sample that would form a false-negative pair
    with one already in the batch is rejected and another is drawn, at most
    ``max_retries`` times (default: the dataset size).
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if len(samples) < batch_size:
        raise DataError(f"{len(samples)} training samples, fewer than batch size {batch_size}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if not filter_false_negatives:
        idx = rng.choice(len(samples), size=batch_size, replace=False)
        return Batch(tuple(int(i) for i in idx), tuple(samples[i] for i in idx))
    budget = len(samples) if max_retries is None else max_retries
    chosen: list[int] = []
    rejected = 0
    for i in rng.permutation(len(samples)):
        cand = samples[i]
        if any(is_false_negative(cand, samples[j]) for j in chosen):
            rejected += 1
            if rejected > budget:
                break
            continue
        chosen.append(int(i))
        if len(chosen) == batch_size:
            return Batch(tuple(chosen), tuple(samples[j] for j in chosen))
    raise DataError(
        f"could not draw {batch_size} mutually compatible samples "
        f"(got {len(chosen)} after {rejected} rejections)"
    )


# ------------------------------------------------------------ clip inputs


@dataclass
class ClipInputs:
    """Central and context features for a list of clips of one or more videos."""

    central: np.ndarray  # (H, d_v)
    pre: np.ndarray  # (H, n, d_v)
    post: np.ndarray  # (H, n, d_v)

    def take(self, idx) -> "ClipInputs":
        return ClipInputs(self.central[idx], self.pre[idx], self.post[idx])


def clip_inputs(
    provider: FeatureProvider,
    videos: dict[str, Video],
    clips: Sequence[tuple[str, Interval]],
    context_n: int,
) -> ClipInputs:
    d = provider.dimension
    h = len(clips)
    central = np.zeros((h, d))
    pre = np.zeros((h, context_n, d))
    post = np.zeros((h, context_n, d))
    for r, (vid, span) in enumerate(clips):
        central[r] = _checked(provider, clip_key(vid, span), d)
        before, after = context_spans(span, videos[vid].length, context_n)
        for q, ctx in enumerate(before):
            if ctx is not None:
                pre[r, q] = _checked(provider, clip_key(vid, ctx), d)
        for q, ctx in enumerate(after):
            if ctx is not None:
                post[r, q] = _checked(provider, clip_key(vid, ctx), d)
    return ClipInputs(central, pre, post)


def _checked(provider: FeatureProvider, key: str, d: int) -> np.ndarray:
    vec = provider.lookup(key)
    if vec.shape != (d,):
        raise DimensionError(f"feature {key!r} has width {vec.shape}, expected {d}")
    return vec


def required_visual_keys(
    dataset: Dataset,
    context_n: int,
    train_scales: Sequence[float] = TRAIN_SCALES,
    test_scales: Sequence[float] = TEST_SCALES_CHARADES,
) -> list[str]:
    """Every clip key training and evaluation will ask the visual provider for."""
    keys: set[str] = set()
    for video in dataset.videos.values():
        for scales, overlap in ((train_scales, TRAIN_OVERLAP), (test_scales, TEST_OVERLAP)):
            for c in clip_candidates(video, scales, overlap):
                keys.add(c.feature_ref)
                before, after = context_spans(c.span, video.length, context_n)
                keys.update(clip_key(video.id, s) for s in before + after if s is not None)
    return sorted(keys)


# ------------------------------------------------------------ synthetic


@dataclass
class SyntheticConfig:
    num_videos: int = 20
    video_length: int = 1200
    vocabulary_size: int = 20
    d_v: int = 32
    sentence_dim: int = 32
    noise_sigma: float = 0.1
    seed: int = 0
    activities_per_video: int = 5
    min_activity_length: int = 96
    max_activity_length: int = 224
    frame_rate: float = 25.0
    feature_mode: str = "midpoint"

    def validate(self) -> None:
        for name in ("num_videos", "video_length", "vocabulary_size", "d_v", "sentence_dim",
                     "activities_per_video", "min_activity_length", "max_activity_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.activities_per_video > self.vocabulary_size:
            raise ValueError("activities_per_video exceeds vocabulary_size")
        if self.min_activity_length > self.max_activity_length:
            raise ValueError("min_activity_length exceeds max_activity_length")
        if self.activities_per_video * self.max_activity_length > self.video_length:
            raise ValueError("activities cannot fit in the video")


@dataclass
class SyntheticData:
    dataset: Dataset
    visual: SyntheticVisualProvider
    sentence: ArrayFeatureProvider
    prototypes: np.ndarray
    sentence_map: np.ndarray
    activity_class: dict[str, int]  # embedding_ref -> prototype index
    config: SyntheticConfig


def synthetic_dataset(config: SyntheticConfig) -> SyntheticData:
    """Videos of non-overlapping latent activities with a learnable text mapping.

    Each vocabulary entry owns a random prototype and a typical duration.
    Sentence embeddings are a fixed linear image of the prototype plus noise;
    complex-query embeddings average their components' embeddings.
    """
    from .annotation import build_complex

    config.validate()
    rng = np.random.default_rng(config.seed)
    v, dv, ds = config.vocabulary_size, config.d_v, config.sentence_dim
    prototypes = _f32(rng.standard_normal((v, dv)))
    sentence_map = rng.standard_normal((ds, dv)) / math.sqrt(dv)
    typical = rng.uniform(config.min_activity_length, config.max_activity_length, size=v)

    videos: dict[str, Video] = {}
    layouts: dict[str, list[tuple[Interval, int]]] = {}
    annotations: list[SentenceAnnotation] = []
    activity_class: dict[str, int] = {}
    sentence_table: dict[str, np.ndarray] = {}
    width = len(str(config.num_videos - 1))
    k = config.activities_per_video
    for n in range(config.num_videos):
        vid = f"v{n:0{width}d}"
        videos[vid] = Video(vid, float(config.video_length), config.frame_rate)
        classes = rng.choice(v, size=k, replace=False)
        lengths = np.clip(
            np.round(typical[classes] * rng.uniform(0.85, 1.15, size=k)),
            config.min_activity_length,
            config.max_activity_length,
        ).astype(int)
        free = config.video_length - int(lengths.sum())
        gaps = np.floor(rng.dirichlet(np.ones(k + 1)) * free).astype(int)
        pos = 0
        layout = []
        for j in range(k):
            pos += int(gaps[j])
            span = Interval(float(pos), float(pos + lengths[j]))
            layout.append((span, int(classes[j])))
            pos += int(lengths[j])
        layouts[vid] = layout
        for j, (span, cls) in enumerate(layout):
            ref = f"{vid}#{j}"
            noise = rng.standard_normal(ds)
            sentence_table[ref] = _f32(sentence_map @ prototypes[cls] + config.noise_sigma * noise)
            activity_class[ref] = cls
            annotations.append(SentenceAnnotation(vid, f"a person performs activity {cls}", span, ref))

    dataset = Dataset(videos, annotations)
    for vid, video in videos.items():
        for q in build_complex(dataset.annotations_for(vid), video.length):
            sentence_table[q.embedding_ref] = _f32(
                np.mean([sentence_table[c.embedding_ref] for c in q.components], axis=0)
            )
            dataset.complex_queries.append(q)

    visual = SyntheticVisualProvider(layouts, prototypes, config.noise_sigma, config.seed, config.feature_mode)
    sentence = ArrayFeatureProvider("sentence", ds, sentence_table)
    return SyntheticData(dataset, visual, sentence, prototypes, sentence_map, activity_class, config)


def split_videos(
    video_ids: Sequence[str], test_fraction: float = 0.25, val_fraction: float = 0.0, seed: int = 0
) -> dict[str, list[str]]:
    """Partition video ids into train/val/test by a seeded shuffle."""
    ids = sorted(video_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = int(round(test_fraction * len(ids)))
    n_val = int(round(val_fraction * len(ids)))
    return {
        "test": sorted(shuffled[:n_test]),
        "val": sorted(shuffled[n_test : n_test + n_val]),
        "train": sorted(shuffled[n_test + n_val :]),
    }
