"""Decoding strategies over any-order density models.

Four decoders share the model contract from :mod:`assd.models.base`:

* ``decode_sequential`` — one conditional per token, the exact reference.
* ``decode_parallel_independent`` — every masked token from its prompt-only
  marginal in a single evaluation (the mean-field baseline; distorts the
  joint unless tokens really are independent).
* ``decode_assd`` — self-drafted speculative decoding: a window of tokens is
  proposed from prompt-only marginals, verified against the chained
  conditionals in one more evaluation, and kept or resampled so the output
  distribution exactly matches sequential decoding while never spending
  more evaluations than tokens generated.
* ``decode_assd_ngram`` — same verification loop with a context-bigram
  draft.  Cheap drafts, but the first window token is no longer guaranteed
  to be accepted, so the evaluation bound does not apply.

The rejection-sampling primitives are exposed separately because their
single-step exactness (committed marginal == oracle conditional) is the
property everything else rests on; ``step_exact_outcome_distribution``
evaluates that marginal analytically.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolation,
    ImpossibleDraftError,
    InvalidConfigError,
    InvalidInputError,
    ZeroResidualError,
)
from .models.base import AnyOrderModel, as_token_array
from .models.bigram import BigramCounts, draft_window
from .ordering import Ordering

DRAFT_SELF = "self"
DRAFT_CONTEXT_BIGRAM = "context-bigram"


def sample_categorical(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw; scaling ``u`` by the total keeps the draw inside
    the support even when the cumulative sum rounds below one, and a
    zero-probability value can never be returned."""
    cum = np.cumsum(probs)
    return int(np.searchsorted(cum, u * cum[-1], side="right"))


def accept_probability(p: float, q: float) -> float:
    """min(1, q/p): chance of keeping a draft with draft density ``p`` and
    oracle density ``q``."""
    if p <= 0.0:
        raise ImpossibleDraftError("draft value has zero draft density")
    return min(1.0, q / p)


def residual_distribution(p_vec: np.ndarray, q_vec: np.ndarray) -> np.ndarray:
    """Normalized positive part of ``q - p``: what to resample from after a
    rejection so the committed token's marginal equals ``q``."""
    if p_vec.shape != q_vec.shape:
        raise InvalidInputError("draft and oracle vectors differ in length")
    residual = np.maximum(q_vec - p_vec, 0.0)
    total = residual.sum()
    if total <= 0.0:
        raise ZeroResidualError(
            "oracle never exceeds draft anywhere; rejection has probability 0"
        )
    return residual / total


def step_exact_outcome_distribution(p_vec: np.ndarray, q_vec: np.ndarray) -> np.ndarray:
    """Marginal distribution of one accept-or-resample step, in closed form.

    Draft from ``p``, accept with min(1, q/p), otherwise resample from the
    residual: the committed token's law is min(p, q) plus the rejection mass
    times the residual, which collapses to ``q`` identically.
    """
    accept_mass = np.minimum(p_vec, q_vec)
    reject_prob = np.maximum(q_vec - p_vec, 0.0).sum()
    if reject_prob <= 0.0:
        return accept_mass.copy()
    return accept_mass + reject_prob * residual_distribution(p_vec, q_vec)


@dataclass
class SamplerConfig:
    """Knobs for the speculative decoders.

    ``k`` is the speculation window (tokens drafted per iteration).  Windows
    of one or two tokens cannot beat sequential decoding (each verified
    window always commits its first token, so the savings start at the
    third), hence the warning.
    """

    k: int = 5
    seed: int = 0
    draft_kind: str = DRAFT_SELF
    assertions: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise InvalidConfigError("speculation window k must be >= 1")
        if self.draft_kind not in (DRAFT_SELF, DRAFT_CONTEXT_BIGRAM):
            raise InvalidConfigError(f"unknown draft kind {self.draft_kind!r}")
        if self.k <= 2:
            warnings.warn(
                f"speculation window k={self.k} cannot outpace sequential "
                "decoding; use k > 2",
                stacklevel=2,
            )


@dataclass
class DecodeTrace:
    """Per-decode accounting.

    ``model_nfe`` counts main-model evaluations, ``aux_nfe`` auxiliary draft
    lookups.  ``accepted_per_iter`` holds the number of tokens committed by
    each speculation iteration (resampled tokens included).  The
    ``window_first_*`` counters instrument the self-draft guarantee that the
    first token of every verified window is accepted; ``draft_cond_checks``
    counts bigram conditioning lookups verified to be non-masked.
    """

    model_nfe: int = 0
    aux_nfe: int = 0
    accepted_per_iter: list[int] = field(default_factory=list)
    resamples: int = 0
    duration_ns: int = 0
    draft_passes: int = 0
    oracle_passes: int = 0
    window_first_checks: int = 0
    window_first_accepts: int = 0
    discarded_drafts: int = 0
    draft_cond_checks: int = 0

    @property
    def iterations(self) -> int:
        return len(self.accepted_per_iter)

    def tokens_per_oracle_iteration(self) -> float:
        """Tokens committed by iterations that paid for an oracle pass,
        divided by the number of such passes."""
        if self.oracle_passes == 0:
            return float("nan")
        committed = sum(self.accepted_per_iter)
        if self.accepted_per_iter and self.oracle_passes < self.iterations:
            committed -= self.accepted_per_iter[-1]  # final draft-only iteration
        return committed / self.oracle_passes

    def to_record(self, *, seed: int, ordering: Ordering, k: int, draft_kind: str,
                  tokens: np.ndarray) -> dict:
        """One JSONL trace object."""
        return {
            "seed": seed,
            "n": ordering.n,
            "m": ordering.m,
            "k": k,
            "draft_kind": draft_kind,
            "model_nfe": self.model_nfe,
            "aux_nfe": self.aux_nfe,
            "accepted_per_iter": list(self.accepted_per_iter),
            "duration_ns": self.duration_ns,
            "tokens": [int(t) for t in tokens],
        }


@dataclass
class DraftStep:
    """Instrumentation record for a single drafted rank."""

    rank: int
    position: int
    value: int
    draft_density: float
    oracle_density: float
    uniform_draw: float
    accepted: bool
    draft_vector: np.ndarray
    oracle_vector: np.ndarray


def _check_decode_inputs(model: AnyOrderModel, tokens: np.ndarray, ordering: Ordering) -> np.ndarray:
    tokens = as_token_array(tokens).copy()
    model.validate_tokens(tokens)
    if ordering.n != model.seq_len:
        raise InvalidInputError("ordering length disagrees with model sequence length")
    if not ordering.is_canonical():
        raise InvalidInputError("decoders require a canonical ordering")
    prompt = ordering.sigma[: ordering.m]
    masked = ordering.sigma[ordering.m :]
    if (tokens[prompt] == model.mask_id).any():
        raise InvalidInputError("prompt positions must carry values")
    if (tokens[masked] != model.mask_id).any():
        raise InvalidInputError("positions to generate must be masked")
    return tokens


def decode_sequential(
    model: AnyOrderModel, tokens: np.ndarray, ordering: Ordering, rng: np.random.Generator
) -> tuple[np.ndarray, DecodeTrace]:
    """One model evaluation per generated token, in decode order."""
    out = _check_decode_inputs(model, tokens, ordering)
    trace = DecodeTrace()
    t0 = time.perf_counter_ns()
    for i in range(ordering.m, ordering.n):
        pos = int(ordering.sigma[i])
        dist = model.marginals_given_visible(out, ordering, i, [pos])[0]
        trace.model_nfe += 1
        out[pos] = sample_categorical(dist, rng.random())
    trace.duration_ns = time.perf_counter_ns() - t0
    return out, trace


def decode_parallel_independent(
    model: AnyOrderModel, tokens: np.ndarray, ordering: Ordering, rng: np.random.Generator
) -> tuple[np.ndarray, DecodeTrace]:
    """All masked tokens at once from their prompt-only marginals."""
    out = _check_decode_inputs(model, tokens, ordering)
    trace = DecodeTrace()
    t0 = time.perf_counter_ns()
    masked = [int(p) for p in ordering.masked_positions()]
    if masked:
        dists = model.marginals_given_visible(out, ordering, ordering.m, masked)
        trace.model_nfe += 1
        for pos, dist in zip(masked, dists):
            out[pos] = sample_categorical(dist, rng.random())
    trace.duration_ns = time.perf_counter_ns() - t0
    return out, trace


def _verify_window(
    out: np.ndarray,
    ordering: Ordering,
    n: int,
    t: int,
    draft_values: np.ndarray,
    draft_vecs: np.ndarray,
    oracle_vecs: np.ndarray,
    rng: np.random.Generator,
    trace: DecodeTrace,
    cfg: SamplerConfig,
    steps: list[DraftStep] | None,
    accept_bias: float,
) -> int:
    """Accept-or-resample sweep over ranks ``[n, t)``.

    Commits the accepted prefix plus, on the first rejection, one token
    resampled from the residual; returns the rank after the last committed
    one.  ``accept_bias`` shifts the acceptance threshold and exists only so
    tests can prove the verification harness detects a broken sampler.
    """
    for j, i in enumerate(range(n, t)):
        pos = int(ordering.sigma[i])
        value = int(draft_values[j])
        p_scalar = float(draft_vecs[j][value])
        q_scalar = float(oracle_vecs[j][value])
        r = rng.random()
        accepted = r < accept_probability(p_scalar, q_scalar) + accept_bias
        if i == n:
            trace.window_first_checks += 1
            if accepted:
                trace.window_first_accepts += 1
            elif cfg.assertions and cfg.draft_kind == DRAFT_SELF:
                raise ContractViolation(
                    "first drafted token of a self-draft window was rejected"
                )
        if steps is not None:
            steps.append(
                DraftStep(i, pos, value, p_scalar, q_scalar, r, bool(accepted),
                          draft_vecs[j].copy(), oracle_vecs[j].copy())
            )
        if accepted:
            out[pos] = value
        else:
            residual = residual_distribution(draft_vecs[j], oracle_vecs[j])
            out[pos] = sample_categorical(residual, rng.random())
            trace.resamples += 1
            trace.discarded_drafts += t - i - 1
            return i + 1
    return t


def _finish_assd(
    trace: DecodeTrace, cfg: SamplerConfig, ordering: Ordering, t0: int
) -> None:
    trace.duration_ns = time.perf_counter_ns() - t0
    budget = ordering.n - ordering.m
    if cfg.assertions and cfg.draft_kind == DRAFT_SELF and cfg.k >= 2:
        if trace.model_nfe > budget:
            raise ContractViolation(
                f"used {trace.model_nfe} evaluations for {budget} tokens"
            )


def decode_assd(
    model: AnyOrderModel,
    tokens: np.ndarray,
    ordering: Ordering,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    record_steps: bool = False,
    accept_bias: float = 0.0,
) -> tuple[np.ndarray, DecodeTrace] | tuple[np.ndarray, DecodeTrace, list[DraftStep]]:
    """Self-drafted speculative decoding.

    Each iteration drafts up to ``k`` tokens from the prompt-only marginals
    (one evaluation), then verifies them against the chained conditionals
    (one more evaluation), committing the accepted prefix and one resampled
    token on the first rejection.  When only the final token remains the
    draft is committed without verification: its draft and oracle
    distributions coincide, so verification could never reject it.
    """
    if cfg.draft_kind != DRAFT_SELF:
        raise InvalidConfigError("decode_assd drafts from the model itself")
    out = _check_decode_inputs(model, tokens, ordering)
    trace = DecodeTrace()
    steps: list[DraftStep] | None = [] if record_steps else None
    t0 = time.perf_counter_ns()
    big_n = ordering.n
    n = ordering.m
    while n < big_n:
        t = min(n + cfg.k, big_n)
        window_positions = [int(p) for p in ordering.sigma[n:t]]
        draft_vecs = model.marginals_given_visible(out, ordering, n, window_positions)
        trace.model_nfe += 1
        trace.draft_passes += 1
        draws = rng.random(t - n)
        draft_values = np.array(
            [sample_categorical(draft_vecs[j], draws[j]) for j in range(t - n)],
            dtype=np.int64,
        )
        if n == big_n - 1:
            out[window_positions[0]] = int(draft_values[0])
            trace.accepted_per_iter.append(1)
            break
        work = out.copy()
        work[window_positions] = draft_values
        oracle_vecs = model.chained_conditionals(work, ordering, n, t)
        trace.model_nfe += 1
        trace.oracle_passes += 1
        advanced = _verify_window(
            out, ordering, n, t, draft_values, draft_vecs, oracle_vecs,
            rng, trace, cfg, steps, accept_bias,
        )
        trace.accepted_per_iter.append(advanced - n)
        n = advanced
    _finish_assd(trace, cfg, ordering, t0)
    if record_steps:
        return out, trace, steps
    return out, trace


def decode_assd_ngram(
    model: AnyOrderModel,
    tokens: np.ndarray,
    ordering: Ordering,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    record_steps: bool = False,
    accept_bias: float = 0.0,
) -> tuple[np.ndarray, DecodeTrace] | tuple[np.ndarray, DecodeTrace, list[DraftStep]]:
    """Speculative decoding with a context-bigram draft.

    The bigram gives no guarantee that a window's first token is accepted,
    so every window is verified (even a final single token) and the
    evaluation count may exceed the number of generated tokens; the output
    distribution is still exactly sequential's.
    """
    if cfg.draft_kind != DRAFT_CONTEXT_BIGRAM:
        raise InvalidConfigError("decode_assd_ngram needs draft_kind='context-bigram'")
    out = _check_decode_inputs(model, tokens, ordering)
    counts = BigramCounts.build(out, model.vocab_size)
    trace = DecodeTrace()
    steps: list[DraftStep] | None = [] if record_steps else None
    t0 = time.perf_counter_ns()
    big_n = ordering.n
    n = ordering.m
    while n < big_n:
        t = min(n + cfg.k, big_n)
        draft_values, draft_vecs = draft_window(counts, ordering, out, n, t, rng)
        trace.aux_nfe += t - n
        trace.draft_cond_checks += t - n
        work = out.copy()
        work[ordering.sigma[n:t]] = draft_values
        oracle_vecs = model.chained_conditionals(work, ordering, n, t)
        trace.model_nfe += 1
        trace.oracle_passes += 1
        advanced = _verify_window(
            out, ordering, n, t, draft_values, draft_vecs, oracle_vecs,
            rng, trace, cfg, steps, accept_bias,
        )
        trace.accepted_per_iter.append(advanced - n)
        for i in range(n, advanced):
            counts.observe_commit(out, int(ordering.sigma[i]))
        n = advanced
    trace.duration_ns = time.perf_counter_ns() - t0
    if record_steps:
        return out, trace, steps
    return out, trace
