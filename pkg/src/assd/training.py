"""Teacher-forced joint-loss training of the two-stream transformer.

The objective is the negative log of the conditional joint over a chunk's
masked block, factorized along a canonical ordering; one forward pass under
the decode-causal query mask yields every term.  Prompt lengths and
orderings are resampled per chunk from a configurable mask distribution
whose masking range warms up linearly over the first steps.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, TrainingDivergedError
from .models.base import AnyOrderModel
from .models.transformer import TwoStreamTransformer
from .ordering import (
    MaskDistributionConfig,
    Ordering,
    build_content_mask,
    build_query_mask,
    sample_mask_patterns,
)


class CharTokenizer:
    """Char-level tokenizer over a fixed alphabet plus a document separator.

    Character ids are the alphabet indices, the separator takes the next id,
    and the mask sentinel sits just past the vocabulary.
    """

    def __init__(self, alphabet: str):
        if len(set(alphabet)) != len(alphabet):
            raise InvalidConfigError("alphabet has repeated characters")
        if not alphabet:
            raise InvalidConfigError("alphabet must not be empty")
        self.alphabet = alphabet
        self.stoi = {ch: i for i, ch in enumerate(alphabet)}
        self.sep_id = len(alphabet)

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 1

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def encode(self, text: str, *, on_unknown: str = "error") -> list[int]:
        ids = []
        for ch in text:
            if ch in self.stoi:
                ids.append(self.stoi[ch])
            elif on_unknown == "skip":
                continue
            else:
                raise InvalidInputError(f"character {ch!r} outside the alphabet")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == self.sep_id:
                out.append("¶")
            elif i == self.mask_id:
                out.append("_")
            else:
                out.append(self.alphabet[int(i)])
        return "".join(out)


def tokenize_and_pack(
    docs: Iterable[str],
    tokenizer: CharTokenizer,
    chunk_len: int,
    *,
    on_unknown: str = "error",
) -> list[np.ndarray]:
    """Join documents with separator tokens and cut the stream into
    fixed-length chunks, dropping the tail."""
    if chunk_len < 1:
        raise InvalidInputError("chunk length must be >= 1")
    stream: list[int] = []
    first = True
    empty = True
    for doc in docs:
        if not first:
            stream.append(tokenizer.sep_id)
        stream.extend(tokenizer.encode(doc, on_unknown=on_unknown))
        first = False
        empty = False
    if empty:
        raise InvalidInputError("corpus is empty")
    n_chunks = len(stream) // chunk_len
    arr = np.asarray(stream[: n_chunks * chunk_len], dtype=np.int64)
    return [chunk for chunk in arr.reshape(n_chunks, chunk_len)]


@dataclass
class LossValue:
    total: float
    n_targets: int

    @property
    def mean(self) -> float:
        return self.total / self.n_targets if self.n_targets else 0.0


def joint_loss(model: AnyOrderModel, tokens: np.ndarray, ordering: Ordering) -> LossValue:
    """Negative log of the conditional joint of the masked block, summed
    along the ordering's chain; one model evaluation."""
    if not ordering.is_canonical():
        raise InvalidInputError("joint loss requires a canonical ordering")
    if ordering.m == ordering.n:
        warnings.warn("empty target block; joint loss is 0", stacklevel=2)
        return LossValue(0.0, 0)
    rows = model.chained_conditionals(tokens, ordering, ordering.m, ordering.n)
    targets = np.asarray(tokens)[ordering.sigma[ordering.m :]]
    picked = rows[np.arange(rows.shape[0]), targets]
    with np.errstate(divide="ignore"):
        logs = np.log(picked)
    return LossValue(-float(logs.sum()), rows.shape[0])


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 0.25
    warmup_steps: int = 100
    decay_steps: int = 4000
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    mask_rate_start: float = 0.15
    mask_rate_min_end: float = 0.90
    mask_rate_max_end: float = 0.99
    mask_warmup_steps: int = 500
    stratified: bool = True
    val_every: int = 500
    val_chunks: int = 64
    early_stop_val_nll: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise InvalidConfigError("steps and batch_size must be positive")
        for name in ("mask_rate_start", "mask_rate_min_end", "mask_rate_max_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfigError(f"{name}={v} outside [0, 1]")
        if self.mask_rate_min_end > self.mask_rate_max_end:
            raise InvalidConfigError("mask_rate_min_end above mask_rate_max_end")
        if self.optimizer not in ("sgd", "adamw"):
            raise InvalidConfigError(f"unknown optimizer {self.optimizer!r}")

    def learning_rate(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.peak_lr * (step + 1) / self.warmup_steps
        done = (step - self.warmup_steps) / max(1, self.decay_steps)
        return self.peak_lr * max(0.0, 1.0 - done)

    def mask_distribution(self, step: int) -> MaskDistributionConfig:
        f = min(1.0, step / self.mask_warmup_steps) if self.mask_warmup_steps else 1.0
        rate_min = self.mask_rate_start + f * (self.mask_rate_min_end - self.mask_rate_start)
        rate_max = self.mask_rate_start + f * (self.mask_rate_max_end - self.mask_rate_start)
        return MaskDistributionConfig(
            prompt_frac_min=1.0 - rate_max,
            prompt_frac_max=1.0 - rate_min,
            stratified=self.stratified,
        )


@dataclass
class TrainResult:
    curve: list[tuple[int, float, float | None]] = field(default_factory=list)
    initial_val_nll: float = math.nan
    final_val_nll: float = math.nan


def _batch_masks(orderings: list[Ordering]):
    qm = np.stack([build_query_mask(o) for o in orderings])
    cm = np.stack([build_content_mask(o) for o in orderings])
    tm = np.zeros(qm.shape[:2], dtype=bool)
    for b, o in enumerate(orderings):
        tm[b, o.sigma[o.m :]] = True
    return qm, cm, tm


def _mean_nll(model: TwoStreamTransformer, chunks: np.ndarray, orderings: list[Ordering]) -> float:
    qm, cm, tm = _batch_masks(orderings)
    total, n_targets, _ = model.loss_and_grads(chunks, qm, cm, tm)
    return total / max(1, n_targets)


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


def train(
    model: TwoStreamTransformer, chunks: Sequence[np.ndarray], cfg: TrainConfig
) -> TrainResult:
    """Deterministic single-process training loop.

    Returns the per-step loss curve with periodic validation NLL on a
    held-out split.  Raises ``TrainingDivergedError`` on a non-finite loss.
    """
    if not chunks:
        raise InvalidInputError("no training chunks")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA55D)))
    chunks = [np.asarray(c, dtype=np.int64) for c in chunks]
    n = chunks[0].shape[0]

    order = rng.permutation(len(chunks))
    n_val = min(cfg.val_chunks, max(1, len(chunks) // 5))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise InvalidInputError("corpus too small to hold out validation chunks")
    val_chunks = np.stack([chunks[i] for i in val_idx])
    end_dist = cfg.mask_distribution(max(cfg.steps, cfg.mask_warmup_steps))
    val_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7A1)))
    val_orderings = sample_mask_patterns(end_dist, n, len(val_idx), val_rng)

    result = TrainResult()
    result.initial_val_nll = _mean_nll(model, val_chunks, val_orderings)

    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}

    val_nll = result.initial_val_nll
    for step in range(cfg.steps):
        picks = rng.integers(0, train_idx.size, size=cfg.batch_size)
        batch = np.stack([chunks[train_idx[i]] for i in picks])
        orderings = sample_mask_patterns(cfg.mask_distribution(step), n, cfg.batch_size, rng)
        qm, cm, tm = _batch_masks(orderings)
        total, n_targets, grads = model.loss_and_grads(batch, qm, cm, tm)
        train_nll = total / max(1, n_targets)
        if not math.isfinite(train_nll):
            raise TrainingDivergedError(f"loss became {train_nll} at step {step}")
        for g in grads.values():
            g /= max(1, n_targets)
        _clip_grads(grads, cfg.clip_norm)
        lr = cfg.learning_rate(step)
        if cfg.optimizer == "sgd":
            for k, p in model.params.items():
                velocity[k] = cfg.momentum * velocity[k] + grads[k]
                p -= lr * velocity[k]
                if cfg.weight_decay:
                    p -= lr * cfg.weight_decay * p
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            t = step + 1
            for k, p in model.params.items():
                adam_m[k] = b1 * adam_m[k] + (1 - b1) * grads[k]
                adam_v[k] = b2 * adam_v[k] + (1 - b2) * grads[k] ** 2
                mhat = adam_m[k] / (1 - b1**t)
                vhat = adam_v[k] / (1 - b2**t)
                p -= lr * (mhat / (np.sqrt(vhat) + eps) + cfg.weight_decay * p)
        is_val_step = (step + 1) % cfg.val_every == 0 or step + 1 == cfg.steps
        if is_val_step:
            val_nll = _mean_nll(model, val_chunks, val_orderings)
        result.curve.append((step, train_nll, val_nll if is_val_step else None))
        if (
            is_val_step
            and cfg.early_stop_val_nll is not None
            and val_nll < cfg.early_stop_val_nll
        ):
            break
    result.final_val_nll = val_nll
    if not result.final_val_nll < result.initial_val_nll:
        warnings.warn(
            "validation NLL did not improve over initialization", stacklevel=2
        )
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst_param: str

    def passed(self, tolerance: float = 1e-3) -> bool:
        return self.max_rel_error < tolerance


def gradient_check(
    model: TwoStreamTransformer,
    tokens: np.ndarray,
    ordering: Ordering,
    *,
    step: float = 1e-4,
    fraction: float = 0.01,
    rng: np.random.Generator | None = None,
    loss_scale: float = 1.0,
) -> GradCheckReport:
    """Central finite differences against analytic gradients on a random
    subset of parameters."""
    if rng is None:
        rng = np.random.default_rng(0)
    qm, cm, tm = _batch_masks([ordering])
    batch = np.asarray(tokens, dtype=np.int64)[None, :]

    def loss_only() -> float:
        total, _, _grads = model.loss_and_grads(batch, qm, cm, tm, loss_scale=loss_scale)
        return total

    _, _, grads = model.loss_and_grads(batch, qm, cm, tm, loss_scale=loss_scale)
    max_err, worst, checked = 0.0, "", 0
    for name, p in model.params.items():
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        n_pick = max(1, int(round(fraction * flat.size)))
        for idx in rng.choice(flat.size, size=min(n_pick, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + step
            up = loss_only()
            flat[idx] = old - step
            down = loss_only()
            flat[idx] = old
            fd = (up - down) / (2 * step)
            an = gflat[idx]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            checked += 1
            if err > max_err:
                max_err, worst = err, f"{name}[{idx}]"
    return GradCheckReport(max_err, checked, worst)
