"""Command-line entry point: generate, annotate, train, eval, infer, audit.

Every subcommand resolves its configuration (defaults, then ``--config``
file, then flags), writes ``manifest.json`` into ``--out`` and only then
starts work.  Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numerical failure (including failed audit checks).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .annotation import annotate_files
from .config import check_keys, from_kv, read_kv
from .data import (
    TEST_SCALES_CHARADES,
    TRAIN_SCALES,
    FileFeatureProvider,
    SyntheticConfig,
    build_training_samples,
    load_annotations,
    required_visual_keys,
    sample_batch,
    split_videos,
    synthetic_dataset,
    write_annotations,
    write_feature_file,
    write_videos,
)
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .evaluation import (
    build_video_clips,
    evaluate_annotations,
    evaluate_complex,
    format_results,
    localize,
    nms_threshold,
)
from .geometry import NON_PARAMETERIZED, PARAMETERIZED, Interval, apply_offsets, encode_offsets, iou, niol, nms
from .model import CtrlConfig, CtrlModel
from .trainer import TrainConfig, TrainingSet, Validation, gradient_audit, train, uses_regression, variant_config

logger = logging.getLogger("ctrl_tall")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

VIDEOS, ANNOTATIONS, VISUAL, SENTENCE, SPLITS = "videos.tsv", "annotations.tsv", "visual.feat", "sentence.feat", "splits.tsv"
CHECKPOINT = "model.ckpt"


@dataclass
class SplitConfig:
    test_fraction: float = 0.25
    val_fraction: float = 0.0


@dataclass
class ProtocolConfig:
    train_scales: tuple[float, ...] = TRAIN_SCALES
    test_scales: tuple[float, ...] = TEST_SCALES_CHARADES


@dataclass
class EvalConfig:
    n_values: tuple[int, ...] = (1, 5)
    m_values: tuple[float, ...] = (0.1, 0.3, 0.5)


# CtrlConfig widths come from the feature files, so they are not config keys.
_MODEL_KEYS = [f.name for f in dataclasses.fields(CtrlConfig) if f.name not in ("d_v", "sentence_dim")]
_SECTIONS: dict[str, list[str]] = {
    "synthetic": [f.name for f in dataclasses.fields(SyntheticConfig)],
    "split": [f.name for f in dataclasses.fields(SplitConfig)],
    "protocol": [f.name for f in dataclasses.fields(ProtocolConfig)],
    "train": [f.name for f in dataclasses.fields(TrainConfig)],
    "model": _MODEL_KEYS,
    "eval": [f.name for f in dataclasses.fields(EvalConfig)],
}
ALL_KEYS = sorted({k for keys in _SECTIONS.values() for k in keys})


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- helpers


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_values(args: argparse.Namespace, overrides: dict[str, Any]) -> dict[str, Any]:
    """Config file values, then flag overrides; unknown keys are rejected."""
    values: dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        values.update(read_kv(path))
    check_keys(values, ALL_KEYS)
    if args.seed is not None:
        values["seed"] = args.seed
    values.update({k: v for k, v in overrides.items() if v is not None})
    return values


def section(cls, values: dict[str, Any], name: str, **extra):
    picked = {k: v for k, v in values.items() if k in _SECTIONS[name]}
    picked.update(extra)
    return from_kv(cls, picked)


def write_manifest(out: Path, command: str, config: dict[str, Any], inputs: Sequence[Path], outputs: Sequence[str], seed):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs if p.exists()},
        "outputs": [str(out / o) for o in outputs],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")


def _plain(obj) -> dict[str, Any]:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(obj).items()}


def data_paths(data: Path) -> dict[str, Path]:
    return {name: data / name for name in (VIDEOS, ANNOTATIONS, VISUAL, SENTENCE, SPLITS)}


def load_data(data: Path, strict: bool = True):
    paths = data_paths(data)
    for name in (VIDEOS, ANNOTATIONS, VISUAL, SENTENCE):
        if not paths[name].exists():
            raise DataError(f"missing data file: {paths[name]}")
    dataset = load_annotations(paths[ANNOTATIONS], paths[VIDEOS], strict=strict)
    visual = FileFeatureProvider(paths[VISUAL], "visual")
    sentence = FileFeatureProvider(paths[SENTENCE], "sentence")
    splits = read_splits(paths[SPLITS], list(dataset.videos))
    return dataset, visual, sentence, splits


def read_splits(path: Path, video_ids: list[str]) -> dict[str, list[str]]:
    if not path.exists():
        return {"train": sorted(video_ids), "val": [], "test": sorted(video_ids)}
    out: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in out:
            raise DataError(f"{path}:{lineno}: expected '<video_id>\\t<train|val|test>'")
        out[parts[1]].append(parts[0])
    return out


def write_splits(path: Path, splits: dict[str, list[str]]) -> None:
    rows = sorted((vid, name) for name, ids in splits.items() for vid in ids)
    path.write_text("".join(f"{vid}\t{name}\n" for vid, name in rows), encoding="utf-8")


def check_dims(model: CtrlModel, visual, sentence) -> None:
    cfg = model.config
    if cfg.d_v != visual.dimension:
        raise DimensionError(f"model expects visual features of dim {cfg.d_v}, feature file has {visual.dimension}")
    if cfg.sentence_dim != sentence.dimension:
        raise DimensionError(
            f"model expects sentence embeddings of dim {cfg.sentence_dim}, feature file has {sentence.dimension}"
        )


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    values = resolve_values(args, {"num_videos": args.num_videos, "noise_sigma": args.noise_sigma})
    syn_cfg = section(SyntheticConfig, values, "synthetic")
    split_cfg = section(SplitConfig, values, "split")
    proto = section(ProtocolConfig, values, "protocol")
    context_n = int(values.get("context_n", 1))
    syn_cfg.validate()
    out = Path(args.out)
    outputs = [VIDEOS, ANNOTATIONS, VISUAL, SENTENCE, SPLITS]
    write_manifest(
        out, "generate",
        {**_plain(syn_cfg), **_plain(split_cfg), **_plain(proto), "context_n": context_n},
        [], outputs, syn_cfg.seed,
    )
    syn = synthetic_dataset(syn_cfg)
    ds = syn.dataset
    write_videos(out / VIDEOS, ds.videos.values())
    write_annotations(out / ANNOTATIONS, ds)
    keys = required_visual_keys(ds, context_n, proto.train_scales, proto.test_scales)
    write_feature_file(out / VISUAL, syn.visual.dimension, {k: syn.visual.lookup(k) for k in keys})
    write_feature_file(out / SENTENCE, syn.sentence.dimension, {k: syn.sentence.lookup(k) for k in syn.sentence.keys()})
    splits = split_videos(list(ds.videos), split_cfg.test_fraction, split_cfg.val_fraction, syn_cfg.seed)
    write_splits(out / SPLITS, splits)
    print(
        f"generated {len(ds.videos)} videos, {len(ds.annotations)} sentences, "
        f"{len(ds.complex_queries)} complex queries, {len(keys)} clip features -> {out}"
    )
    return EXIT_OK


def cmd_annotate(args) -> int:
    values = resolve_values(args, {})
    out = Path(args.out)
    inputs = [Path(args.descriptions), Path(args.activities), Path(args.videos)]
    for p in inputs:
        if not p.exists():
            raise DataError(f"input file not found: {p}")
    conj = tuple(c.strip() for c in args.conjunctions.split(",") if c.strip())
    write_manifest(out, "annotate", {"conjunctions": list(conj), **values}, inputs, [ANNOTATIONS], values.get("seed"))
    dataset = annotate_files(*inputs, conjunctions=conj)
    write_annotations(out / ANNOTATIONS, dataset)
    print(f"{len(dataset.annotations)} sentence annotations, {len(dataset.complex_queries)} complex queries -> {out / ANNOTATIONS}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = resolve_values(
        args,
        {"variant": args.variant, "epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size},
    )
    data = Path(args.data)
    dataset, visual, sentence, splits = load_data(data)
    train_cfg = section(TrainConfig, values, "train")
    model_cfg = section(CtrlConfig, values, "model", d_v=visual.dimension, sentence_dim=sentence.dimension)
    proto = section(ProtocolConfig, values, "protocol")
    out = Path(args.out)
    write_manifest(
        out, "train",
        {**_plain(train_cfg), **_plain(variant_config(train_cfg.variant, model_cfg)), **_plain(proto)},
        [p for p in data_paths(data).values()], [CHECKPOINT, CHECKPOINT + ".cfg", "train_report.csv"], train_cfg.seed,
    )
    train_ds = dataset.subset(splits["train"])
    samples = build_training_samples(train_ds, proto.train_scales)
    if not samples:
        raise DataError("no training samples in the train split")
    train_set = TrainingSet.build(samples, train_ds, visual, sentence, model_cfg.context_n)
    validation = None
    if splits["val"]:
        val_ds = dataset.subset(splits["val"])
        validation = Validation(val_ds, sentence, build_video_clips(val_ds, visual, model_cfg.context_n, proto.test_scales))
    t0 = time.perf_counter()
    report, _ = train(train_set, model_cfg, train_cfg, validation, out / CHECKPOINT)
    (out / "train_report.csv").write_text(report.to_csv(), encoding="utf-8")
    last = report.rows[-1]
    print(
        f"trained {train_cfg.variant} on {len(train_set)} samples for {len(report.rows)} epochs "
        f"in {time.perf_counter() - t0:.1f}s; final loss {last.total_loss:.4f}"
        + (f"; best val R@1 {report.best_r1:.4f} at epoch {report.best_epoch}" if report.best_r1 is not None else "")
    )
    return EXIT_OK


def _load_model(path: Path) -> CtrlModel:
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    if not Path(str(path) + ".cfg").exists():
        raise DataError(f"checkpoint config not found: {path}.cfg")
    try:
        return CtrlModel.load(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_eval(args) -> int:
    values = resolve_values(args, {"n_values": args.n, "m_values": args.m, "test_scales": args.test_scales})
    ev = section(EvalConfig, values, "eval")
    proto = section(ProtocolConfig, values, "protocol")
    ckpt = Path(args.checkpoint)
    data = Path(args.data)
    model = _load_model(ckpt)
    dataset, visual, sentence, splits = load_data(data)
    check_dims(model, visual, sentence)
    apply_reg = model.config.alpha > 0 and not args.no_regression
    out = Path(args.out)
    outputs = ["complex.csv", "complex_fusion.csv"] if args.complex else ["metrics.csv", "results.tsv"]
    write_manifest(
        out, "eval",
        {**_plain(ev), **_plain(proto), "split": args.split, "complex": args.complex, "apply_regression": apply_reg},
        [ckpt, Path(str(ckpt) + ".cfg")] + list(data_paths(data).values()), outputs + ["table.txt"], values.get("seed"),
    )
    ds = dataset.subset(splits[args.split])
    clips = build_video_clips(ds, visual, model.config.context_n, proto.test_scales)
    if args.complex:
        if not ds.complex_queries:
            logger.warning("no complex queries in the %s split; reports are empty", args.split)
        _, plain = evaluate_complex(model, ds, sentence, clips, ev.n_values, ev.m_values, apply_reg, fusion=False)
        _, fused = evaluate_complex(model, ds, sentence, clips, ev.n_values, ev.m_values, apply_reg, fusion=True)
        (out / "complex.csv").write_text(plain.to_csv(), encoding="utf-8")
        (out / "complex_fusion.csv").write_text(fused.to_csv(), encoding="utf-8")
        table = plain.format_table("CTRL") + "\n\n" + fused.format_table("CTRL+Fusion")
    else:
        results, report = evaluate_annotations(model, ds, sentence, clips, ev.n_values, ev.m_values, apply_reg)
        (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
        qvid = {a.embedding_ref: a.video_id for a in ds.annotations}
        fps = {v.id: v.frame_rate for v in ds.videos.values()}
        (out / "results.tsv").write_text(format_results(results, qvid, fps), encoding="utf-8")
        table = report.format_table("CTRL")
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_infer(args) -> int:
    values = resolve_values(args, {"test_scales": args.test_scales})
    proto = section(ProtocolConfig, values, "protocol")
    ckpt = Path(args.checkpoint)
    data = Path(args.data)
    model = _load_model(ckpt)
    dataset, visual, sentence, _ = load_data(data)
    check_dims(model, visual, sentence)
    if args.video not in dataset.videos:
        raise DataError(f"unknown video id {args.video!r}")
    try:
        query = sentence.lookup(args.query)
    except KeyError:
        raise DataError(f"no sentence embedding with key {args.query!r} in {data / SENTENCE}") from None
    out = Path(args.out)
    write_manifest(
        out, "infer", {**_plain(proto), "video": args.video, "query": args.query, "top": args.top},
        [ckpt] + list(data_paths(data).values()), ["infer.tsv"], values.get("seed"),
    )
    single = dataset.subset([args.video])
    clips = build_video_clips(single, visual, model.config.context_n, proto.test_scales)
    res = localize(model, query, clips[args.video], args.top, model.config.alpha > 0, args.query)
    text = format_results([res], {args.query: args.video}, {args.video: single.videos[args.video].frame_rate})
    (out / "infer.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# -------------------------------------------------------------------- audit


def _raster(a: Interval, b: Interval) -> tuple[float, float]:
    lo, hi = int(min(a.start, b.start)), int(max(a.end, b.end))
    cells = np.arange(lo, hi)
    in_a = (cells >= a.start) & (cells < a.end)
    in_b = (cells >= b.start) & (cells < b.end)
    inter = np.sum(in_a & in_b)
    return inter / np.sum(in_a | in_b), np.sum(in_a & ~in_b) / np.sum(in_a)


def audit_checks(seed: int = 0) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    """Named self-checks; each returns (passed, detail)."""
    rng = np.random.default_rng(seed)

    def gradients():
        syn = synthetic_dataset(SyntheticConfig(num_videos=2, d_v=6, sentence_dim=5, seed=seed))
        samples = build_training_samples(syn.dataset)
        ts = TrainingSet.build(samples, syn.dataset, syn.visual, syn.sentence, 1)
        base = CtrlConfig(d_v=6, sentence_dim=5, d_s=8)
        batch = ts.batch(sample_batch(samples, 4, np.random.default_rng(seed)).indices)
        worst = {}
        for variant in ("aln", "loc", "reg_p", "reg_np"):
            model = CtrlModel(variant_config(variant, base), seed=seed)
            if uses_regression(variant):
                # place residuals on both sides of the smooth-L1 breakpoint
                _, pred = model.forward_scores(batch.sentences, batch.clips)
                target = pred.data + rng.uniform(0.3, 1.7, size=pred.shape) * rng.choice([-1, 1], size=pred.shape)
                if variant == "reg_p":
                    batch.offsets_param = target
                else:
                    batch.offsets_nonparam = target
            worst[variant] = gradient_audit(model, batch, variant, sample_count=250, seed=seed)
        ok = all(v < 1e-4 for v in worst.values())
        return ok, ", ".join(f"{k} {v:.2e}" for k, v in worst.items())

    def geometry():
        worst = 0.0
        for _ in range(2000):
            s = rng.integers(0, 60, size=2)
            a = Interval(int(s[0]), int(s[0] + rng.integers(1, 30)))
            b = Interval(int(s[1]), int(s[1] + rng.integers(1, 30)))
            r_iou, r_niol = _raster(a, b)
            worst = max(worst, abs(iou(a, b) - r_iou), abs(niol(a, b) - r_niol))
        return worst < 1e-9, f"max deviation from raster oracle {worst:.1e}"

    def offsets():
        worst = 0.0
        for _ in range(2000):
            c0, g0 = rng.uniform(0, 1000, size=2)
            cand = Interval(c0, c0 + rng.uniform(1, 300))
            gt = Interval(g0, g0 + rng.uniform(1, 300))
            for kind in (PARAMETERIZED, NON_PARAMETERIZED):
                back = apply_offsets(kind, cand, encode_offsets(kind, cand, gt), 2000)
                worst = max(worst, abs(back.start - gt.start), abs(back.end - gt.end))
        return worst < 1e-9, f"max round-trip error {worst:.1e}"

    def suppression():
        threshold = nms_threshold()
        if abs(threshold - 0.3) > 1e-12:
            return False, f"default threshold {threshold}"
        for _ in range(1000):
            items = []
            for _ in range(int(rng.integers(1, 15))):
                s = int(rng.integers(0, 100))
                items.append((Interval(s, s + int(rng.integers(1, 40))), float(rng.random())))
            kept = nms(items, threshold)
            for i, (a, _) in enumerate(kept):
                for b, _ in kept[i + 1 :]:
                    if iou(a, b) > threshold:
                        return False, f"kept pair {a} {b}"
        return True, "no kept pair above 0.3 in 1000 fixtures"

    return [("gradients", gradients), ("geometry", geometry), ("offsets", offsets), ("nms", suppression)]


def run_audit(seed: int = 0, stream=None) -> bool:
    stream = stream if stream is not None else sys.stdout
    all_ok = True
    for name, check in audit_checks(seed):
        t0 = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        stream.write(f"{'PASS' if ok else 'FAIL'} {name:<10} {time.perf_counter() - t0:5.2f}s  {detail}\n")
    return all_ok


def cmd_audit(args) -> int:
    values = resolve_values(args, {})
    seed = int(values.get("seed", 0))
    if args.out:
        write_manifest(Path(args.out), "audit", {"seed": seed}, [], [], seed)
    return EXIT_OK if run_audit(seed) else EXIT_NUMERICAL


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctrl-tall", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="key=value config file; flags override it")
    shared.add_argument("--seed", type=int, help="overrides the config seed")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[shared], help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num-videos", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("annotate", parents=[shared], help="build sentence annotations from descriptions")
    p.add_argument("--descriptions", required=True, help="TSV: video_id, subject, description")
    p.add_argument("--activities", required=True, help="TSV: video_id, category, keywords, start, end (seconds)")
    p.add_argument("--videos", required=True, help="TSV: video_id, length (frames), frame rate")
    p.add_argument("--conjunctions", default="then,while,after,and,but")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", parents=[shared], help="train one model variant")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("aln", "loc", "reg_p", "reg_np"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="R@n, IoU=m on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--n", type=_ints, help="comma-separated n values")
    p.add_argument("--m", type=_floats, help="comma-separated IoU thresholds")
    p.add_argument("--test-scales", type=_floats)
    p.add_argument("--complex", action="store_true", help="evaluate complex queries, plain and fused")
    p.add_argument("--no-regression", action="store_true", help="rank raw windows without offsets")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[shared], help="localize one query in one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--query", required=True, help="sentence embedding key")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--test-scales", type=_floats)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("audit", parents=[shared], help="gradient, geometry and NMS self-checks")
    p.add_argument("--out", help="directory for the manifest")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
