"""The cross-modal temporal regression localizer and its losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, Tensor
from .config import from_kv, read_kv, to_kv_text
from .data import ClipInputs
from .errors import DimensionError
from .geometry import NON_PARAMETERIZED, OFFSET_KINDS, PARAMETERIZED

SINGLE_QUERY = "single_query"
K_CLASS = "k_class"

# Regression weights used for the K-class detection head.
DETECTION_ALPHA = {NON_PARAMETERIZED: 2.0, PARAMETERIZED: 10.0}


@dataclass
class CtrlConfig:
    d_v: int
    sentence_dim: int
    d_s: int = 64
    context_n: int = 1
    offset_kind: str = NON_PARAMETERIZED
    alpha: float = 1.0
    alpha_c: float = 1.0
    alpha_w: float | None = None  # None -> 1 / (N - 1)
    head_mode: str = SINGLE_QUERY
    num_classes: int = 0

    def __post_init__(self):
        for name in ("d_v", "sentence_dim", "d_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.context_n < 0:
            raise ValueError("context_n must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.offset_kind not in OFFSET_KINDS:
            raise ValueError(f"unknown offset kind {self.offset_kind!r}")
        if self.head_mode not in (SINGLE_QUERY, K_CLASS):
            raise ValueError(f"unknown head mode {self.head_mode!r}")
        if self.head_mode == K_CLASS and self.num_classes < 1:
            raise ValueError("k_class mode needs num_classes >= 1")

    @property
    def score_width(self) -> int:
        return 1 if self.head_mode == SINGLE_QUERY else self.num_classes + 1

    @property
    def offset_width(self) -> int:
        return 2 if self.head_mode == SINGLE_QUERY else 2 * self.num_classes

    def negative_weight(self, batch_size: int) -> float:
        if self.alpha_w is not None:
            return self.alpha_w
        return 1.0 / (batch_size - 1) if batch_size > 1 else 0.0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ag.constant(x)


class CtrlModel:
    """Visual/sentence encoders, fusion and the two sibling heads."""

    def __init__(self, config: CtrlConfig, seed: int = 0, store: ParameterStore | None = None):
        self.config = config
        if store is not None:
            self.store = store
            return
        rng = np.random.default_rng(seed)
        c = config
        self.store = ParameterStore()
        self._linear(rng, "visual", 3 * c.d_v, c.d_s)
        self._linear(rng, "sentence", c.sentence_dim, c.d_s)
        self._linear(rng, "fusion", 2 * c.d_s, c.d_s)
        self._linear(rng, "align", 3 * c.d_s, c.score_width)
        self._linear(rng, "regress", 3 * c.d_s, c.offset_width)
        if c.head_mode == K_CLASS:
            # stands in for the sentence embedding when there is no query
            self.store.add("class_query", np.ones((1, c.d_s)))

    def _linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self.store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.store.add(f"{name}.bias", np.zeros((1, fan_out)))

    def _apply(self, name: str, x: Tensor) -> Tensor:
        return ag.add_bias(ag.matmul(x, self.store[f"{name}.weight"]), self.store[f"{name}.bias"])

    # ------------------------------------------------------------ encoders

    def encode_visual(self, central, pre, post) -> Tensor:
        """Central ``(H, d_v)``, context ``(H, n, d_v)`` -> ``(H, d_s)``.

        Pre and post context are mean-pooled separately; an empty context
        contributes a zero vector.
        """
        central = _as_tensor(central)
        if central.data.ndim != 2 or central.shape[1] != self.config.d_v:
            raise DimensionError(f"central features have shape {central.shape}, expected (H, {self.config.d_v})")
        h = central.shape[0]
        slots = []
        for ctx in (pre, post):
            ctx = _as_tensor(ctx)
            if ctx.data.ndim != 3 or ctx.shape[0] != h or ctx.shape[2] != self.config.d_v:
                raise DimensionError(f"context features have shape {ctx.shape}, expected ({h}, n, {self.config.d_v})")
            if ctx.shape[1] > self.config.context_n:
                raise DimensionError(f"{ctx.shape[1]} context clips exceed context_n={self.config.context_n}")
            slots.append(ag.reduce("mean", ctx, axis=1) if ctx.shape[1] else ag.constant(np.zeros((h, self.config.d_v))))
        return self._apply("visual", ag.concat([slots[0], central, slots[1]]))

    def encode_clips(self, clips: ClipInputs) -> Tensor:
        return self.encode_visual(clips.central, clips.pre, clips.post)

    def encode_sentence(self, raw) -> Tensor:
        raw = _as_tensor(raw)
        if raw.data.ndim != 2 or raw.shape[1] != self.config.sentence_dim:
            raise DimensionError(
                f"sentence embeddings have shape {raw.shape}, expected (N, {self.config.sentence_dim})"
            )
        return self._apply("sentence", raw)

    def fuse(self, f_s: Tensor, f_v: Tensor) -> Tensor:
        """(f_s * f_v) | (f_s + f_v) | FC(f_s | f_v), in that order."""
        if f_s.shape != f_v.shape or f_s.shape[-1] != self.config.d_s:
            raise DimensionError(f"fuse needs two (P, {self.config.d_s}) inputs, got {f_s.shape} and {f_v.shape}")
        fc = self._apply("fusion", ag.concat([f_s, f_v]))
        return ag.concat([ag.mul(f_s, f_v), ag.add(f_s, f_v), fc])

    def heads(self, f_sv: Tensor) -> tuple[Tensor, Tensor]:
        return self._apply("align", f_sv), self._apply("regress", f_sv)

    # ------------------------------------------------------------ forward

    def forward_scores(self, sentences, clips: ClipInputs) -> tuple[Tensor, Tensor]:
        """Score matrix ``cs[i, j]`` (sentence i, clip j) and diagonal offsets."""
        self._require(SINGLE_QUERY)
        f_s = self.encode_sentence(sentences)
        f_v = self.encode_clips(clips)
        n = f_s.shape[0]
        if f_v.shape[0] != n:
            raise DimensionError(f"{n} sentences but {f_v.shape[0]} clips")
        rows = np.repeat(np.arange(n), n)
        cols = np.tile(np.arange(n), n)
        f_sv = self.fuse(ag.gather_rows(f_s, rows), ag.gather_rows(f_v, cols))
        scores = ag.reshape(self._apply("align", f_sv), (n, n))
        diag = ag.gather_rows(f_sv, np.arange(n) * (n + 1))
        offsets = self._apply("regress", diag)
        return scores, offsets

    def score_clips(self, sentence, clips: ClipInputs) -> tuple[np.ndarray, np.ndarray]:
        """One query against H clips: scores ``(H,)`` and offsets ``(H, 2)``."""
        self._require(SINGLE_QUERY)
        sentence = np.asarray(sentence, dtype=np.float64).reshape(1, -1)
        f_s = self.encode_sentence(sentence)
        f_v = self.encode_clips(clips)
        h = f_v.shape[0]
        f_sv = self.fuse(ag.gather_rows(f_s, np.zeros(h, dtype=np.intp)), f_v)
        scores, offsets = self.heads(f_sv)
        return scores.data[:, 0].copy(), offsets.data.copy()

    def classification_forward(self, clips: ClipInputs) -> tuple[Tensor, Tensor]:
        """K+1 class logits (last = background) and 2K per-class offsets."""
        self._require(K_CLASS)
        f_v = self.encode_clips(clips)
        h = f_v.shape[0]
        q = ag.gather_rows(self.store["class_query"], np.zeros(h, dtype=np.intp))
        return self.heads(self.fuse(q, f_v))

    def _require(self, mode: str) -> None:
        if self.config.head_mode != mode:
            raise ValueError(f"operation needs head_mode={mode!r}, model is {self.config.head_mode!r}")

    # ------------------------------------------------------------ persistence

    def save(self, path: str | Path) -> None:
        """Write ``<path>`` (CTRLCKPT parameters) and ``<path>.cfg`` (config)."""
        path = Path(path)
        ag.save_checkpoint(path, self.store)
        Path(str(path) + ".cfg").write_text(to_kv_text(self.config), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CtrlModel":
        path = Path(path)
        config = from_kv(CtrlConfig, read_kv(str(path) + ".cfg"))
        model = cls(config)
        model.store.load_values(ag.load_checkpoint(path))
        return model


# ------------------------------------------------------------------ losses


def alignment_loss(cs: Tensor, alpha_c: float = 1.0, alpha_w: float = 1.0) -> Tensor:
    """Mean over rows of weighted softplus(-diagonal) + softplus(off-diagonal)."""
    n = cs.shape[0]
    if cs.data.ndim != 2 or cs.shape[1] != n:
        raise DimensionError(f"alignment loss needs a square matrix, got {cs.shape}")
    diag = ag.take(cs, np.arange(n) * (n + 1))
    pos = ag.sum_all(ag.softplus(ag.scale(diag, -1.0)))
    off_mask = 1.0 - np.eye(n)
    neg = ag.sum_all(ag.mul_const(ag.softplus(cs), off_mask))
    return ag.scale(ag.add(ag.scale(pos, alpha_c), ag.scale(neg, alpha_w)), 1.0 / n)


def regression_loss(pred_offsets: Tensor, gt_offsets) -> Tensor:
    gt = np.asarray(gt_offsets, dtype=np.float64)
    if pred_offsets.shape != gt.shape:
        raise DimensionError(f"offset shapes differ: {pred_offsets.shape} vs {gt.shape}")
    residual = ag.scale(ag.add(pred_offsets, ag.constant(-gt)), -1.0)
    return ag.scale(ag.sum_all(ag.smooth_l1(residual)), 1.0 / gt.shape[0])


def total_loss(cs: Tensor, pred_offsets: Tensor, gt_offsets, config: CtrlConfig) -> Tensor:
    aln = alignment_loss(cs, config.alpha_c, config.negative_weight(cs.shape[0]))
    if config.alpha == 0:
        return aln
    return ag.add(aln, ag.scale(regression_loss(pred_offsets, gt_offsets), config.alpha))


def overlap_loss(cs_diagonal: Tensor, ious) -> Tensor:
    """Sum of 0.5 * (sigmoid(cs)^2 / IoU - 1) over aligned pairs."""
    ious = np.asarray(ious, dtype=np.float64)
    if np.any(ious <= 0):
        raise ValueError("overlap loss needs IoU > 0 for every aligned pair")
    s2 = ag.square(ag.sigmoid(cs_diagonal))
    return ag.sum_all(ag.scale(ag.shift(ag.mul_const(s2, 1.0 / ious), -1.0), 0.5))


def diagonal(cs: Tensor) -> Tensor:
    n = cs.shape[0]
    return ag.take(cs, np.arange(n) * (n + 1))


def classification_loss(
    logits: Tensor, offsets: Tensor, labels, gt_offsets, alpha: float
) -> Tensor:
    """Cross-entropy over K+1 classes plus alpha * smooth L1 on the true class's offsets.

    ``labels`` use index K for background; background rows add no regression
    term.  ``gt_offsets`` is ``(N, 2)``.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n, width = logits.shape
    k = width - 1
    logp = ag.log_softmax(logits)
    ce = ag.scale(ag.sum_all(ag.take(logp, np.arange(n) * width + labels)), -1.0 / n)
    fg = np.flatnonzero(labels < k)
    if alpha == 0 or fg.size == 0:
        return ce
    cols = np.stack([2 * labels[fg], 2 * labels[fg] + 1], axis=1)
    picked = ag.reshape(ag.take(offsets, (fg[:, None] * (2 * k) + cols).reshape(-1)), (fg.size, 2))
    gt = np.asarray(gt_offsets, dtype=np.float64)[fg]
    residual = ag.add(picked, ag.constant(-gt))
    reg = ag.scale(ag.sum_all(ag.smooth_l1(residual)), 1.0 / n)
    return ag.add(ce, ag.scale(reg, alpha))
