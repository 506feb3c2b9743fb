"""Training loop for the four model variants."""

from __future__ import annotations

import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import ClipInputs, Dataset, FeatureProvider, TrainingSample, clip_inputs, sample_batch
from .errors import DataError, NumericalError
from .evaluation import VideoClips, evaluate_annotations
from .geometry import NON_PARAMETERIZED, PARAMETERIZED, iou
from .model import CtrlConfig, CtrlModel, alignment_loss, diagonal, overlap_loss, regression_loss

logger = logging.getLogger(__name__)

VARIANTS = ("aln", "loc", "reg_p", "reg_np")


@dataclass
class TrainConfig:
    variant: str = "reg_np"
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    validate_every: int = 1
    patience: int = 10
    filter_false_negatives: bool = True
    primary_iou: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def variant_config(variant: str, base: CtrlConfig) -> CtrlConfig:
    """Model config implied by a variant: offset kind, and alpha=0 without regression."""
    if variant == "reg_p":
        return dataclasses.replace(base, offset_kind=PARAMETERIZED, alpha=base.alpha or 1.0)
    if variant == "reg_np":
        return dataclasses.replace(base, offset_kind=NON_PARAMETERIZED, alpha=base.alpha or 1.0)
    if variant in ("aln", "loc"):
        return dataclasses.replace(base, alpha=0.0)
    raise ValueError(f"unknown variant {variant!r}")


def uses_regression(variant: str) -> bool:
    return variant in ("reg_p", "reg_np")


@dataclass
class TrainingSet:
    """Training samples with their features gathered into arrays."""

    samples: list[TrainingSample]
    sentences: np.ndarray
    clips: ClipInputs
    offsets_param: np.ndarray
    offsets_nonparam: np.ndarray
    ious: np.ndarray

    @classmethod
    def build(
        cls,
        samples: Sequence[TrainingSample],
        dataset: Dataset,
        visual: FeatureProvider,
        sentences: FeatureProvider,
        context_n: int,
    ) -> "TrainingSet":
        samples = list(samples)
        if not samples:
            raise DataError("no training samples")
        sent = np.stack([sentences.lookup(s.sentence.embedding_ref) for s in samples])
        clips = clip_inputs(visual, dataset.videos, [(s.clip.video_id, s.clip.span) for s in samples], context_n)
        return cls(
            samples,
            sent,
            clips,
            np.array([s.gt_offsets_param.as_tuple() for s in samples]),
            np.array([s.gt_offsets_nonparam.as_tuple() for s in samples]),
            np.array([iou(s.clip.span, s.sentence.span) for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, indices) -> "BatchInputs":
        idx = np.asarray(indices, dtype=np.intp)
        return BatchInputs(
            idx,
            self.sentences[idx],
            self.clips.take(idx),
            self.offsets_param[idx],
            self.offsets_nonparam[idx],
            self.ious[idx],
        )


@dataclass
class BatchInputs:
    indices: np.ndarray
    sentences: np.ndarray
    clips: ClipInputs
    offsets_param: np.ndarray
    offsets_nonparam: np.ndarray
    ious: np.ndarray

    def offsets(self, kind: str) -> np.ndarray:
        return self.offsets_param if kind == PARAMETERIZED else self.offsets_nonparam


def variant_loss(model: CtrlModel, variant: str, batch: BatchInputs) -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, alignment, auxiliary) losses for one batch."""
    cfg = model.config
    cs, offsets = model.forward_scores(batch.sentences, batch.clips)
    aln = alignment_loss(cs, cfg.alpha_c, cfg.negative_weight(cs.shape[0]))
    if variant == "aln":
        return aln, aln, None
    if variant == "loc":
        loc = overlap_loss(diagonal(cs), batch.ious)
        return ag.add(aln, loc), aln, loc
    if cfg.alpha == 0:
        return aln, aln, None
    reg = regression_loss(offsets, batch.offsets(cfg.offset_kind))
    return ag.add(aln, ag.scale(reg, cfg.alpha)), aln, reg


def gradient_audit(
    model: CtrlModel,
    batch: BatchInputs,
    variant: str,
    epsilon: float = 1e-5,
    sample_count: int = 400,
    seed: int = 0,
) -> float:
    """Max relative error of backprop against central differences for a variant loss.

    The default step is 1e-5: at 1e-6 roundoff in the loss already costs
    around 1e-5 relative error on the smallest gradient entries.
    """
    return ag.finite_diff_check(
        lambda: variant_loss(model, variant, batch)[0],
        model.store,
        epsilon=epsilon,
        sample_count=sample_count,
        rng=np.random.default_rng(seed),
    )


@dataclass
class EpochRow:
    epoch: int
    total_loss: float
    aln_loss: float
    reg_loss: float
    r1: float | None
    r5: float | None
    seconds: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_checkpoint: str | None = None
    best_epoch: int | None = None
    best_r1: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,total_loss,aln_loss,reg_loss,R@1,R@5\n")
        for r in self.rows:
            r1 = "" if r.r1 is None else repr(r.r1)
            r5 = "" if r.r5 is None else repr(r.r5)
            buf.write(f"{r.epoch},{r.total_loss!r},{r.aln_loss!r},{r.reg_loss!r},{r1},{r5}\n")
        return buf.getvalue()


@dataclass
class Validation:
    dataset: Dataset
    sentences: FeatureProvider
    clips: dict[str, VideoClips]


def train(
    train_set: TrainingSet,
    model_config: CtrlConfig,
    config: TrainConfig,
    validation: Validation | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[TrainReport, CtrlModel]:
    """Train one variant; with validation, keep the parameters with best R@1."""
    if len(train_set) < config.batch_size:
        raise DataError(f"{len(train_set)} training samples, fewer than batch size {config.batch_size}")
    mcfg = variant_config(config.variant, model_config)
    model = CtrlModel(mcfg, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    steps = math.ceil(len(train_set) / config.batch_size)
    apply_reg = uses_regression(config.variant)
    report = TrainReport()
    best_values = None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        for _ in range(steps):
            picked = sample_batch(
                train_set.samples, config.batch_size, rng, config.filter_false_negatives
            )
            batch = train_set.batch(picked.indices)
            model.store.zero_grad()
            total, aln, aux = variant_loss(model, config.variant, batch)
            values = (total.item(), aln.item(), 0.0 if aux is None else aux.item())
            if not all(math.isfinite(v) for v in values):
                raise NumericalError(
                    f"non-finite loss {values} at epoch {epoch}; batch sample indices {list(picked.indices)}"
                )
            total.backward()
            ag.adam_step(model.store, lr=config.learning_rate)
            sums += values
        means = sums / steps
        r1 = r5 = None
        if validation is not None and epoch % config.validate_every == 0:
            _, rep = evaluate_annotations(
                model, validation.dataset, validation.sentences, validation.clips,
                (1, 5), (config.primary_iou,), apply_reg,
            )
            r1, r5 = float(rep[(1, config.primary_iou)]), float(rep[(5, config.primary_iou)])
            if report.best_r1 is None or r1 > report.best_r1:
                report.best_r1, report.best_epoch = r1, epoch
                best_values = model.store.values()
                stale = 0
                if checkpoint_path is not None:
                    model.save(checkpoint_path)
                    report.best_checkpoint = str(checkpoint_path)
            else:
                stale += 1
        report.rows.append(EpochRow(epoch, *(float(x) for x in means), r1, r5, time.perf_counter() - t0))
        logger.info("epoch %d loss %.4f aln %.4f aux %.4f R@1 %s", epoch, *means, r1)
        if validation is not None and stale >= config.patience:
            break
    if best_values is not None:
        model.store.load_values(best_values)
    elif checkpoint_path is not None:
        model.save(checkpoint_path)
        report.best_checkpoint = str(checkpoint_path)
    return report, model
