"""Vectorized trial runners for tabular models.

The verification matrix needs millions of seeded decodes; looping the
per-decode samplers in Python would blow the time budget.  These runners
execute the same algorithms with all trials advanced in lockstep: every
conditional a decode can ever ask the joint table for is precomputed
through ``TabularJointModel.conditional`` (the identical float path the
scalar decoders use), trials are grouped by how many tokens they have
committed, and the draft/verify/resample sweeps become array operations.

A committed masked block is tracked as a mixed-radix code (first masked
rank is the most significant digit), which doubles as the outcome index
for empirical distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidInputError
from .models.bigram import BigramCounts
from .models.tabular import TabularJointModel
from .ordering import Ordering

DEFAULT_CHUNK = 200_000


@dataclass
class BatchDecodeResult:
    """Aggregated accounting for a batch of decodes of one configuration."""

    n_outcomes: int
    n_trials: int = 0
    outcome_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    model_nfe: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    aux_nfe: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    oracle_passes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    window_first_checks: int = 0
    window_first_accepts: int = 0
    resamples: int = 0
    draft_cond_checks: int = 0
    draft_cond_violations: int = 0
    min_commit_nonfinal: int | None = None

    def __post_init__(self):
        if self.outcome_counts.size == 0:
            self.outcome_counts = np.zeros(self.n_outcomes, dtype=np.int64)

    def absorb(self, other: "BatchDecodeResult") -> None:
        self.n_trials += other.n_trials
        self.outcome_counts += other.outcome_counts
        for name in ("model_nfe", "aux_nfe", "iterations", "oracle_passes"):
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)]))
        self.window_first_checks += other.window_first_checks
        self.window_first_accepts += other.window_first_accepts
        self.resamples += other.resamples
        self.draft_cond_checks += other.draft_cond_checks
        self.draft_cond_violations += other.draft_cond_violations
        mine, theirs = self.min_commit_nonfinal, other.min_commit_nonfinal
        self.min_commit_nonfinal = (
            theirs if mine is None else mine if theirs is None else min(mine, theirs)
        )

    def nfe_bound_violations(self, budget: int) -> int:
        return int((self.model_nfe > budget).sum())

    def outcome_distribution(self) -> dict[int, int]:
        return {int(i): int(c) for i, c in enumerate(self.outcome_counts) if c}


class _ChainTables:
    """Every conditional reachable during a decode, precomputed.

    ``chain[i - m]`` maps a committed-prefix code to the distribution of
    rank ``i``; ``draft[(n, i)]`` maps the code at iteration start ``n`` to
    rank ``i``'s prompt-only-style marginal.  ``draft[(n, n)]`` is the very
    same array as ``chain[n - m]`` — the window's first draft distribution
    and its first oracle conditional coincide by construction, which is the
    self-draft acceptance guarantee in table form.
    """

    def __init__(self, model: TabularJointModel, ordering: Ordering,
                 prompt_tokens: np.ndarray, k: int):
        if not ordering.is_canonical():
            raise InvalidInputError("batch runners require a canonical ordering")
        self.v = model.vocab_size
        self.m, self.n_total = ordering.m, ordering.n
        v, m, big_n = self.v, self.m, self.n_total
        prompt_map = {int(p): int(prompt_tokens[p]) for p in ordering.sigma[:m]}
        sigma = ordering.sigma

        def conditioning(n_committed: int, code: int) -> dict[int, int]:
            cond = dict(prompt_map)
            for j in range(n_committed - m):
                digit = (code // v ** (n_committed - m - 1 - j)) % v
                cond[int(sigma[m + j])] = digit
            return cond

        self.chain: list[np.ndarray] = []
        for i in range(m, big_n):
            rows = np.empty((v ** (i - m), v))
            for code in range(rows.shape[0]):
                rows[code] = model.conditional(conditioning(i, code), int(sigma[i]))
            self.chain.append(rows)
        self.chain_cum = [rows.cumsum(axis=1) for rows in self.chain]

        self.draft: dict[tuple[int, int], np.ndarray] = {}
        for n in range(m, big_n):
            self.draft[(n, n)] = self.chain[n - m]
            for i in range(n + 1, min(n + k, big_n)):
                rows = np.empty((v ** (n - m), v))
                for code in range(rows.shape[0]):
                    rows[code] = model.conditional(conditioning(n, code), int(sigma[i]))
                self.draft[(n, i)] = rows
        self.draft_cum = {key: rows.cumsum(axis=1) for key, rows in self.draft.items()}


def _inverse_cdf(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draw matching ``sampler.sample_categorical``."""
    scaled = u * cum_rows[:, -1]
    return (cum_rows <= scaled[:, None]).sum(axis=1)


def _pick(rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    return rows[np.arange(rows.shape[0]), values]


def run_sequential_trials(
    model: TabularJointModel,
    prompt_tokens: np.ndarray,
    ordering: Ordering,
    n_trials: int,
    rng: np.random.Generator,
    *,
    chunk: int = DEFAULT_CHUNK,
) -> BatchDecodeResult:
    """Sequential decoding, all trials in lockstep (one rank at a time)."""
    v, m, big_n = model.vocab_size, ordering.m, ordering.n
    tabs = _ChainTables(model, ordering, prompt_tokens, 1)
    result = BatchDecodeResult(n_outcomes=v ** (big_n - m))
    done = 0
    while done < n_trials:
        t = min(chunk, n_trials - done)
        code = np.zeros(t, dtype=np.int64)
        for i in range(m, big_n):
            code = code * v + _inverse_cdf(tabs.chain_cum[i - m][code], rng.random(t))
        part = BatchDecodeResult(n_outcomes=result.n_outcomes, n_trials=t)
        part.outcome_counts = np.bincount(code, minlength=result.n_outcomes)
        part.model_nfe = np.full(t, big_n - m, dtype=np.int32)
        part.aux_nfe = np.zeros(t, dtype=np.int32)
        part.iterations = np.full(t, big_n - m, dtype=np.int32)
        part.oracle_passes = np.zeros(t, dtype=np.int32)
        result.absorb(part)
        done += t
    return result


def run_parallel_trials(
    model: TabularJointModel,
    prompt_tokens: np.ndarray,
    ordering: Ordering,
    n_trials: int,
    rng: np.random.Generator,
    *,
    chunk: int = DEFAULT_CHUNK,
) -> BatchDecodeResult:
    """Mean-field decoding: every masked token from its prompt-only marginal."""
    v, m, big_n = model.vocab_size, ordering.m, ordering.n
    prompt_map = {int(p): int(prompt_tokens[p]) for p in ordering.sigma[:m]}
    marginals = [
        model.conditional(prompt_map, int(ordering.sigma[i])).cumsum()
        for i in range(m, big_n)
    ]
    result = BatchDecodeResult(n_outcomes=v ** (big_n - m))
    done = 0
    while done < n_trials:
        t = min(chunk, n_trials - done)
        code = np.zeros(t, dtype=np.int64)
        for cum in marginals:
            scaled = rng.random(t) * cum[-1]
            code = code * v + (cum[None, :] <= scaled[:, None]).sum(axis=1)
        part = BatchDecodeResult(n_outcomes=result.n_outcomes, n_trials=t)
        part.outcome_counts = np.bincount(code, minlength=result.n_outcomes)
        part.model_nfe = np.ones(t, dtype=np.int32) if big_n > m else np.zeros(t, dtype=np.int32)
        part.aux_nfe = np.zeros(t, dtype=np.int32)
        part.iterations = np.ones(t, dtype=np.int32)
        part.oracle_passes = np.zeros(t, dtype=np.int32)
        result.absorb(part)
        done += t
    return result


def _digit_of(code: np.ndarray, n_digits: int, rank_offset: int, v: int) -> np.ndarray:
    """Digit for rank ``m + rank_offset`` out of a code with ``n_digits``
    committed digits."""
    return (code // v ** (n_digits - 1 - rank_offset)) % v


def _verify_sweep(
    qvecs: np.ndarray,
    pvecs: np.ndarray,
    drafts: np.ndarray,
    code: np.ndarray,
    v: int,
    rng: np.random.Generator,
    part: BatchDecodeResult,
    accept_bias: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accept-or-resample over a window for all active trials at once.

    Returns (new code, committed counts, per-rank committed values).
    """
    a, w, _ = qvecs.shape
    running = np.ones(a, dtype=bool)
    committed = np.zeros(a, dtype=np.int64)
    values = np.full((a, w), -1, dtype=np.int64)
    newcode = code.copy()
    for j in range(w):
        p_s = _pick(pvecs[:, j], drafts[:, j])
        q_s = _pick(qvecs[:, j], drafts[:, j])
        r = rng.random(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            threshold = np.minimum(1.0, q_s / p_s) + accept_bias
        accepted = running & (r < threshold)
        rejected = running & ~accepted
        if j == 0:
            part.window_first_checks += a
            part.window_first_accepts += int(accepted.sum())
        if accepted.any():
            values[accepted, j] = drafts[accepted, j]
            newcode[accepted] = newcode[accepted] * v + drafts[accepted, j]
            committed[accepted] += 1
        if rejected.any():
            residual = np.maximum(qvecs[rejected, j] - pvecs[rejected, j], 0.0)
            totals = residual.sum(axis=1)
            if (totals <= 0.0).any():
                raise ContractViolation("zero-residual resample requested")
            cum = residual.cumsum(axis=1)
            picks = (cum <= (rng.random(rejected.sum()) * totals)[:, None]).sum(axis=1)
            values[rejected, j] = picks
            newcode[rejected] = newcode[rejected] * v + picks
            committed[rejected] += 1
            part.resamples += int(rejected.sum())
        running = accepted
    return newcode, committed, values


def run_assd_self_trials(
    model: TabularJointModel,
    prompt_tokens: np.ndarray,
    ordering: Ordering,
    k: int,
    n_trials: int,
    rng: np.random.Generator,
    *,
    chunk: int = DEFAULT_CHUNK,
    accept_bias: float = 0.0,
) -> BatchDecodeResult:
    """Self-drafted speculative decoding, vectorized across trials."""
    v, m, big_n = model.vocab_size, ordering.m, ordering.n
    tabs = _ChainTables(model, ordering, prompt_tokens, k)
    result = BatchDecodeResult(n_outcomes=v ** (big_n - m))
    done = 0
    while done < n_trials:
        t = min(chunk, n_trials - done)
        result.absorb(_assd_self_chunk(tabs, k, t, rng, accept_bias))
        done += t
    return result


def _assd_self_chunk(
    tabs: _ChainTables, k: int, t: int, rng: np.random.Generator, accept_bias: float
) -> BatchDecodeResult:
    v, m, big_n = tabs.v, tabs.m, tabs.n_total
    part = BatchDecodeResult(n_outcomes=v ** (big_n - m), n_trials=t)
    code = np.zeros(t, dtype=np.int64)
    n_cur = np.full(t, m, dtype=np.int64)
    nfe = np.zeros(t, dtype=np.int32)
    iters = np.zeros(t, dtype=np.int32)
    oracles = np.zeros(t, dtype=np.int32)
    for n in range(m, big_n):
        act = np.flatnonzero(n_cur == n)
        if act.size == 0:
            continue
        stop = min(n + k, big_n)
        w = stop - n
        a = act.size
        acode = code[act]
        drafts = np.empty((a, w), dtype=np.int64)
        pvecs = np.empty((a, w, v))
        u = rng.random((a, w))
        for j in range(w):
            pvecs[:, j] = tabs.draft[(n, n + j)][acode]
            drafts[:, j] = _inverse_cdf(tabs.draft_cum[(n, n + j)][acode], u[:, j])
        nfe[act] += 1
        iters[act] += 1
        if n == big_n - 1:
            code[act] = acode * v + drafts[:, 0]
            n_cur[act] = big_n
            continue
        nfe[act] += 1
        oracles[act] += 1
        qvecs = np.empty((a, w, v))
        prefix = acode.copy()
        for j in range(w):
            qvecs[:, j] = tabs.chain[n + j - m][prefix]
            prefix = prefix * v + drafts[:, j]
        newcode, committed, _ = _verify_sweep(
            qvecs, pvecs, drafts, acode, v, rng, part, accept_bias
        )
        code[act] = newcode
        n_cur[act] = n + committed
        nonfinal = committed[(n + committed) < big_n]
        if nonfinal.size:
            low = int(nonfinal.min())
            part.min_commit_nonfinal = (
                low if part.min_commit_nonfinal is None else min(part.min_commit_nonfinal, low)
            )
    part.outcome_counts = np.bincount(code, minlength=part.n_outcomes)
    part.model_nfe, part.iterations, part.oracle_passes = nfe, iters, oracles
    part.aux_nfe = np.zeros(t, dtype=np.int32)
    return part


def run_assd_ngram_trials(
    model: TabularJointModel,
    prompt_tokens: np.ndarray,
    ordering: Ordering,
    k: int,
    n_trials: int,
    rng: np.random.Generator,
    *,
    chunk: int = DEFAULT_CHUNK,
    accept_bias: float = 0.0,
) -> BatchDecodeResult:
    """Context-bigram-drafted speculative decoding, vectorized across trials.

    Each trial carries its own evolving pair-count table; conditioning
    sources resolve identically for every trial at a given stage because
    canonical orderings commit positions in ascending order.
    """
    v, m, big_n = model.vocab_size, ordering.m, ordering.n
    tabs = _ChainTables(model, ordering, prompt_tokens, k)
    result = BatchDecodeResult(n_outcomes=v ** (big_n - m))
    done = 0
    while done < n_trials:
        t = min(chunk, n_trials - done)
        result.absorb(
            _assd_ngram_chunk(tabs, model, prompt_tokens, ordering, k, t, rng, accept_bias)
        )
        done += t
    return result


def _cond_source(ordering: Ordering, prompt_tokens: np.ndarray, mask_id: int,
                 n: int, rank: int):
    """Where rank ``rank``'s bigram conditioning value comes from at a stage
    where ranks < ``n`` are committed: a prompt scalar, a committed-digit
    rank, an earlier draft slot of the same window, or the uniform fallback
    at position 0.  Resolution is deterministic per (stage, rank)."""
    pos = int(ordering.sigma[rank])
    if pos == 0:
        return ("uniform", None)
    left_rank = int(ordering.ranks[pos - 1])
    if prompt_tokens[pos - 1] != mask_id:
        return ("prompt", int(prompt_tokens[pos - 1]))
    if left_rank < n:
        return ("digit", left_rank)
    if n <= left_rank < rank:
        return ("draft", left_rank - n)
    return ("violation", None)


def _assd_ngram_chunk(
    tabs: _ChainTables,
    model: TabularJointModel,
    prompt_tokens: np.ndarray,
    ordering: Ordering,
    k: int,
    t: int,
    rng: np.random.Generator,
    accept_bias: float,
) -> BatchDecodeResult:
    v, m, big_n = tabs.v, tabs.m, tabs.n_total
    sigma, ranks = ordering.sigma, ordering.ranks
    part = BatchDecodeResult(n_outcomes=v ** (big_n - m), n_trials=t)
    base = BigramCounts.build(prompt_tokens, v).pair_counts
    counts = np.broadcast_to(base, (t, v, v)).copy()
    code = np.zeros(t, dtype=np.int64)
    n_cur = np.full(t, m, dtype=np.int64)
    nfe = np.zeros(t, dtype=np.int32)
    aux = np.zeros(t, dtype=np.int32)
    iters = np.zeros(t, dtype=np.int32)
    oracles = np.zeros(t, dtype=np.int32)

    def conditioning_values(act, acode, drafts, n, rank) -> np.ndarray | None:
        kind, info = _cond_source(ordering, prompt_tokens, model.mask_id, n, rank)
        part.draft_cond_checks += act.size
        if kind == "uniform":
            return None
        if kind == "violation":
            part.draft_cond_violations += act.size
            raise ContractViolation("bigram conditioning value would be masked")
        if kind == "prompt":
            return np.full(act.size, info, dtype=np.int64)
        if kind == "digit":
            return _digit_of(acode, n - m, info - m, v)
        return drafts[:, info]

    for n in range(m, big_n):
        act = np.flatnonzero(n_cur == n)
        if act.size == 0:
            continue
        stop = min(n + k, big_n)
        w = stop - n
        a = act.size
        acode = code[act]
        drafts = np.empty((a, w), dtype=np.int64)
        pvecs = np.empty((a, w, v))
        for j in range(w):
            cond = conditioning_values(act, acode, drafts, n, n + j)
            if cond is None:
                rows = np.full((a, v), 1.0 / v)
            else:
                picked = counts[act, cond]
                totals = picked.sum(axis=1, keepdims=True)
                rows = np.where(totals > 0, picked / np.where(totals > 0, totals, 1), 1.0 / v)
            pvecs[:, j] = rows
            drafts[:, j] = _inverse_cdf(rows.cumsum(axis=1), rng.random(a))
        aux[act] += w
        iters[act] += 1
        nfe[act] += 1
        oracles[act] += 1
        qvecs = np.empty((a, w, v))
        prefix = acode.copy()
        for j in range(w):
            qvecs[:, j] = tabs.chain[n + j - m][prefix]
            prefix = prefix * v + drafts[:, j]
        newcode, committed, values = _verify_sweep(
            qvecs, pvecs, drafts, acode, v, rng, part, accept_bias
        )
        # pair-count updates for freshly committed tokens, ascending
        for j in range(w):
            sel = committed > j
            if not sel.any():
                continue
            pos = int(sigma[n + j])
            val = values[sel, j]
            if pos > 0:
                kind, info = _cond_source(ordering, prompt_tokens, model.mask_id, n, n + j)
                if kind == "prompt":
                    left = np.full(val.shape[0], info, dtype=np.int64)
                elif kind == "digit":
                    left = _digit_of(acode[sel], n - m, info - m, v)
                else:  # committed earlier in this very window
                    left = values[sel, info]
                np.add.at(counts, (act[sel], left, val), 1)
            if pos + 1 < big_n and prompt_tokens[pos + 1] != model.mask_id:
                np.add.at(counts, (act[sel], val, int(prompt_tokens[pos + 1])), 1)
        code[act] = newcode
        n_cur[act] = n + committed
    part.outcome_counts = np.bincount(code, minlength=part.n_outcomes)
    part.model_nfe, part.aux_nfe = nfe, aux
    part.iterations, part.oracle_passes = iters, oracles
    return part
