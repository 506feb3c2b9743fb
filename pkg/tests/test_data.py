import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrl_tall.data import (
    ArrayFeatureProvider,
    ClipCandidate,
    Dataset,
    FileFeatureProvider,
    SentenceAnnotation,
    SyntheticConfig,
    Video,
    assign_training_samples,
    build_training_samples,
    clip_candidates,
    clip_inputs,
    clip_key,
    context_spans,
    is_false_negative,
    load_annotations,
    load_videos,
    parse_clip_key,
    read_feature_file,
    required_visual_keys,
    sample_batch,
    split_videos,
    synthetic_dataset,
    write_annotations,
    write_feature_file,
    write_videos,
)
from ctrl_tall.errors import DataError, DimensionError
from ctrl_tall.geometry import NON_PARAMETERIZED, Interval, iou, niol


def brute_force_assign(clips, annotations):
    """Three rules written out independently: IoU, nIoL, one sentence per clip."""
    result = {}
    for c in clips:
        ok = []
        for a in annotations:
            if a.video_id != c.video_id:
                continue
            inter = max(0.0, min(c.span.end, a.span.end) - max(c.span.start, a.span.start))
            union = c.span.length + a.span.length - inter
            if inter / union > 0.5 and (c.span.length - inter) / c.span.length < 0.2:
                ok.append((inter / union, a))
        if ok:
            top = max(v for v, _ in ok)
            result[c.feature_ref] = min((a for v, a in ok if v == top), key=lambda a: a.span.start)
    return result


def random_fixture(rng):
    n_clips = int(rng.integers(1, 51))
    clips = []
    for _ in range(n_clips):
        s = int(rng.integers(0, 200))
        span = Interval(s, s + int(rng.integers(1, 60)))
        if any(c.span == span for c in clips):
            continue
        clips.append(ClipCandidate("v", span, span.length, clip_key("v", span)))
    anns = []
    for k in range(int(rng.integers(0, 6))):
        s = int(rng.integers(0, 200))
        anns.append(SentenceAnnotation("v", f"s{k}", Interval(s, s + int(rng.integers(1, 80))), f"v#{k}"))
    return clips, anns


class TestAssignment:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            clips, anns = random_fixture(rng)
            got = {s.clip.feature_ref: s.sentence for s in assign_training_samples(clips, anns)}
            assert got == brute_force_assign(clips, anns)

    def test_rules_hold(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            clips, anns = random_fixture(rng)
            samples = assign_training_samples(clips, anns)
            assert len({s.clip.feature_ref for s in samples}) == len(samples)
            for s in samples:
                assert iou(s.clip.span, s.sentence.span) > 0.5
                assert niol(s.clip.span, s.sentence.span) < 0.2

    def test_boundary_iou_exactly_half_rejected(self):
        clip = ClipCandidate("v", Interval(0, 10), 10, "v|0|10")
        ann = SentenceAnnotation("v", "x", Interval(0, 20), "r")
        assert assign_training_samples([clip], [ann]) == []

    def test_tie_goes_to_earlier_start(self):
        clip = ClipCandidate("v", Interval(10, 20), 10, "v|10|20")
        a = SentenceAnnotation("v", "a", Interval(10, 22), "a")
        b = SentenceAnnotation("v", "b", Interval(8, 20), "b")
        (s,) = assign_training_samples([clip], [a, b])
        assert s.sentence.embedding_ref == "b"

    def test_offsets_attached(self):
        clip = ClipCandidate("v", Interval(10, 20), 10, "v|10|20")
        ann = SentenceAnnotation("v", "a", Interval(9, 21), "a")
        (s,) = assign_training_samples([clip], [ann])
        assert s.offsets(NON_PARAMETERIZED).as_tuple() == (-1, 1)


class TestKeysAndContext:
    def test_clip_key_round_trip(self):
        span = Interval(3, 17.5)
        assert clip_key("vid", span) == "vid|3|17.5"
        assert parse_clip_key(clip_key("vid", span)) == ("vid", span)

    def test_malformed_key(self):
        with pytest.raises(KeyError):
            parse_clip_key("nope")

    def test_context_clipped(self):
        pre, post = context_spans(Interval(0, 10), 25, 2)
        assert pre == [None, None]
        assert post == [Interval(10, 20), Interval(20, 25)]

    def test_context_features_zero_outside(self):
        videos = {"v": Video("v", 30)}
        table = {clip_key("v", Interval(a, b)): np.full(2, a + 1.0) for a, b in [(0, 10), (10, 20), (20, 30)]}
        prov = ArrayFeatureProvider("visual", 2, table)
        ci = clip_inputs(prov, videos, [("v", Interval(0, 10))], 1)
        np.testing.assert_array_equal(ci.pre[0, 0], 0.0)
        np.testing.assert_array_equal(ci.post[0, 0], 11.0)


class TestFeatureFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        table = {f"k{i}|0|{i + 1}": rng.standard_normal(5).astype(np.float32).astype(float) for i in range(20)}
        path = tmp_path / "x.feat"
        write_feature_file(path, 5, table)
        dim, back = read_feature_file(path)
        assert dim == 5 and sorted(back) == sorted(table)
        for k in table:
            np.testing.assert_array_equal(back[k], table[k])

    def test_provider_errors(self, tmp_path):
        with pytest.raises(DataError):
            FileFeatureProvider(tmp_path / "missing.feat", "visual")
        path = tmp_path / "x.feat"
        write_feature_file(path, 3, {"a": np.zeros(3)})
        with pytest.raises(DimensionError):
            FileFeatureProvider(path, "visual", dimension=4)
        prov = FileFeatureProvider(path, "visual", dimension=3)
        with pytest.raises(KeyError):
            prov.lookup("b")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.feat"
        path.write_bytes(b"garbage!" + bytes(20))
        with pytest.raises(DataError):
            read_feature_file(path)


class TestAnnotationFiles:
    def test_round_trip(self, tmp_path):
        syn = synthetic_dataset(SyntheticConfig(num_videos=3, seed=1))
        write_videos(tmp_path / "videos.tsv", syn.dataset.videos.values())
        write_annotations(tmp_path / "ann.tsv", syn.dataset)
        back = load_annotations(tmp_path / "ann.tsv", tmp_path / "videos.tsv")
        assert back.videos == syn.dataset.videos
        assert back.annotations == syn.dataset.annotations
        assert [q.embedding_ref for q in back.complex_queries] == [
            q.embedding_ref for q in syn.dataset.complex_queries
        ]
        assert [q.components for q in back.complex_queries] == [q.components for q in syn.dataset.complex_queries]

    def test_seconds_to_frames(self, tmp_path):
        (tmp_path / "v.tsv").write_text("a\t100\t10\n")
        (tmp_path / "a.tsv").write_text("a\t1.5\t3\tperson opens door\n")
        ds = load_annotations(tmp_path / "a.tsv", tmp_path / "v.tsv")
        assert ds.annotations[0].span == Interval(15, 30)
        assert ds.annotations[0].embedding_ref == "a#0"

    def test_out_of_range(self, tmp_path):
        (tmp_path / "v.tsv").write_text("a\t100\t10\n")
        (tmp_path / "a.tsv").write_text("a\t5\t20\tperson opens door\n")
        with pytest.raises(DataError):
            load_annotations(tmp_path / "a.tsv", tmp_path / "v.tsv")
        ds = load_annotations(tmp_path / "a.tsv", tmp_path / "v.tsv", strict=False)
        assert ds.annotations[0].span == Interval(50, 100)

    @pytest.mark.parametrize(
        "line",
        ["b\t1\t2\tunknown video", "a\t2\t1\tinverted", "a\tx\t2\tnot a number", "a\t1\t2\t ", "a\t1"],
    )
    def test_malformed(self, tmp_path, line):
        (tmp_path / "v.tsv").write_text("a\t100\t10\n")
        (tmp_path / "a.tsv").write_text(line + "\n")
        with pytest.raises(DataError):
            load_annotations(tmp_path / "a.tsv", tmp_path / "v.tsv")

    def test_bad_videos(self, tmp_path):
        (tmp_path / "v.tsv").write_text("a\t0\t10\n")
        with pytest.raises(DataError):
            load_videos(tmp_path / "v.tsv")


def _samples_two_videos():
    anns = [
        SentenceAnnotation("v", "a", Interval(0, 100), "v#0"),
        SentenceAnnotation("v", "b", Interval(200, 300), "v#1"),
        SentenceAnnotation("w", "c", Interval(0, 100), "w#0"),
    ]
    ds = Dataset({"v": Video("v", 400), "w": Video("w", 400)}, anns)
    return build_training_samples(ds, scales=(64, 80), overlap=0.8)


class TestBatches:
    def test_filter_removes_false_negatives(self):
        samples = _samples_two_videos()
        rng = np.random.default_rng(0)
        batch = sample_batch(samples, 3, rng)
        for i, a in enumerate(batch.samples):
            for j, b in enumerate(batch.samples):
                if i != j:
                    assert not is_false_negative(a, b)

    def test_exhausted_raises(self):
        samples = _samples_two_videos()
        with pytest.raises(DataError):
            sample_batch(samples, 4, np.random.default_rng(0))

    def test_unfiltered_allows_duplicates_of_activity(self):
        samples = _samples_two_videos()
        batch = sample_batch(samples, len(samples), np.random.default_rng(0), filter_false_negatives=False)
        assert sorted(batch.indices) == list(range(len(samples)))

    def test_deterministic(self):
        samples = _samples_two_videos()
        a = sample_batch(samples, 3, np.random.default_rng(5))
        b = sample_batch(samples, 3, np.random.default_rng(5))
        assert a.indices == b.indices

    def test_too_small(self):
        with pytest.raises(DataError):
            sample_batch(_samples_two_videos()[:1], 2)
        with pytest.raises(ValueError):
            sample_batch(_samples_two_videos(), 1)


class TestSynthetic:
    def test_deterministic(self):
        a = synthetic_dataset(SyntheticConfig(num_videos=4, seed=3))
        b = synthetic_dataset(SyntheticConfig(num_videos=4, seed=3))
        assert a.dataset.annotations == b.dataset.annotations
        key = clip_key(a.dataset.annotations[0].video_id, a.dataset.annotations[0].span)
        np.testing.assert_array_equal(a.visual.lookup(key), b.visual.lookup(key))
        ref = a.dataset.annotations[0].embedding_ref
        np.testing.assert_array_equal(a.sentence.lookup(ref), b.sentence.lookup(ref))

    def test_layout(self):
        cfg = SyntheticConfig(num_videos=5, seed=2)
        syn = synthetic_dataset(cfg)
        for vid, video in syn.dataset.videos.items():
            anns = syn.dataset.annotations_for(vid)
            assert len(anns) == cfg.activities_per_video
            spans = sorted((a.span for a in anns), key=lambda s: s.start)
            for x, y in zip(spans, spans[1:]):
                assert x.end <= y.start
            assert all(0 <= s.start and s.end <= video.length for s in spans)
        assert syn.dataset.complex_queries
        for q in syn.dataset.complex_queries:
            assert q.span.length < syn.dataset.videos[q.video_id].length / 2

    def test_noiseless_nearest_prototype(self):
        syn = synthetic_dataset(SyntheticConfig(num_videos=6, noise_sigma=0.0, seed=4))
        samples = build_training_samples(syn.dataset)
        protos = syn.prototypes / np.linalg.norm(syn.prototypes, axis=1, keepdims=True)
        correct = 0
        for s in samples:
            f = syn.visual.lookup(s.clip.feature_ref)
            correct += int(np.argmax(protos @ f) == syn.activity_class[s.sentence.embedding_ref])
        assert correct == len(samples)

    def test_feature_file_exact(self, tmp_path):
        syn = synthetic_dataset(SyntheticConfig(num_videos=2, seed=0))
        keys = required_visual_keys(syn.dataset, 1, (64, 128), (128,))
        table = {k: syn.visual.lookup(k) for k in keys}
        write_feature_file(tmp_path / "v.feat", syn.visual.dimension, table)
        prov = FileFeatureProvider(tmp_path / "v.feat", "visual")
        for k in keys[:50]:
            np.testing.assert_array_equal(prov.lookup(k), table[k])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            synthetic_dataset(SyntheticConfig(activities_per_video=30))
        with pytest.raises(ValueError):
            synthetic_dataset(SyntheticConfig(noise_sigma=-1))


class TestSplit:
    def test_partition(self):
        ids = [f"v{i:02d}" for i in range(20)]
        sp = split_videos(ids, 0.25, 0.1, seed=1)
        assert len(sp["test"]) == 5 and len(sp["val"]) == 2 and len(sp["train"]) == 13
        assert sorted(sp["test"] + sp["val"] + sp["train"]) == ids
        assert sp == split_videos(list(reversed(ids)), 0.25, 0.1, seed=1)

    @settings(max_examples=30)
    @given(st.integers(1, 40), st.integers(0, 100))
    def test_disjoint(self, n, seed):
        ids = [str(i) for i in range(n)]
        sp = split_videos(ids, 0.25, 0.0, seed)
        assert not set(sp["test"]) & set(sp["train"])


def test_clip_candidates_sorted_unique():
    cands = clip_candidates(Video("v", 700), (64, 128, 256), 0.8)
    spans = [c.span for c in cands]
    assert len(set(spans)) == len(spans)
    assert spans == sorted(spans, key=lambda s: (s.length, s.start))
