"""Any-subset decode orderings and the attention masks they induce.

An ordering is a bijection ``sigma`` on ``{0, ..., N-1}`` together with a
prompt length ``m``: ``sigma[:m]`` are the positions given as conditioning,
``sigma[m:]`` are the positions to generate, in decode order.  The canonical
form keeps both blocks sorted ascending, which collapses the factorization
of a given prompt/mask split onto a single decode path.

Masks are plain ``(N, N)`` uint8 arrays: ``allow[r, c] == 1`` means the
query at sequence position ``r`` may attend to the key/value at position
``c``.  The query-stream mask is strictly causal in decode rank (a position
never sees its own content); the content-stream mask additionally allows
the diagonal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

CANONICAL_LATTICE = "canonical-lattice"
ANY_PERMUTATION = "any-permutation"


class Ordering:
    """A decode ordering: permutation ``sigma`` plus prompt length ``m``."""

    __slots__ = ("sigma", "m", "_ranks")

    def __init__(self, sigma: Sequence[int] | np.ndarray, m: int):
        sigma = np.asarray(sigma, dtype=np.int64)
        if sigma.ndim != 1:
            raise InvalidInputError("sigma must be one-dimensional")
        n = sigma.shape[0]
        if not 0 <= m <= n:
            raise InvalidInputError(f"prompt length {m} outside [0, {n}]")
        counts = np.bincount(sigma, minlength=n) if n else np.zeros(0, dtype=np.int64)
        if sigma.size and (sigma.min() < 0 or sigma.max() >= n or (counts != 1).any()):
            raise InvalidInputError("sigma is not a bijection on range(N)")
        self.sigma = sigma
        self.sigma.setflags(write=False)
        self.m = int(m)
        ranks = np.empty(n, dtype=np.int64)
        ranks[sigma] = np.arange(n)
        ranks.setflags(write=False)
        self._ranks = ranks

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    @property
    def ranks(self) -> np.ndarray:
        """Inverse permutation: ``ranks[position] == decode rank``."""
        return self._ranks

    def prompt_positions(self) -> np.ndarray:
        return self.sigma[: self.m]

    def masked_positions(self) -> np.ndarray:
        return self.sigma[self.m :]

    def is_canonical(self) -> bool:
        pre = self.sigma[: self.m]
        post = self.sigma[self.m :]
        return bool(np.all(np.diff(pre) > 0) and np.all(np.diff(post) > 0))

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "m": self.m, "sigma": self.sigma.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Ordering":
        obj = json.loads(text)
        ordering = cls(obj["sigma"], obj["m"])
        if ordering.n != obj["n"]:
            raise InvalidInputError("ordering length disagrees with its 'n' field")
        return ordering

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Ordering)
            and self.m == other.m
            and np.array_equal(self.sigma, other.sigma)
        )

    def __repr__(self) -> str:
        return f"Ordering(sigma={self.sigma.tolist()}, m={self.m})"


@dataclass(frozen=True)
class MaskDistributionConfig:
    """How to draw a prompt length and ordering for one sequence.

    ``prompt_frac_min``/``prompt_frac_max`` bound the prompt fraction m/N;
    the integer prompt length is drawn uniformly from
    ``[ceil(min * N), floor(max * N)]``.  ``stratified`` enables
    low-discrepancy batch sampling (one draw per equal-width stratum).
    ``mode`` selects canonical block-sorted orderings or raw permutations
    (the latter exists as an ablation switch).
    """

    prompt_frac_min: float = 0.0
    prompt_frac_max: float = 1.0
    stratified: bool = False
    mode: str = CANONICAL_LATTICE

    def __post_init__(self):
        if not 0.0 <= self.prompt_frac_min <= self.prompt_frac_max <= 1.0:
            raise InvalidConfigError(
                "require 0 <= prompt_frac_min <= prompt_frac_max <= 1, got "
                f"[{self.prompt_frac_min}, {self.prompt_frac_max}]"
            )
        if self.mode not in (CANONICAL_LATTICE, ANY_PERMUTATION):
            raise InvalidConfigError(f"unknown ordering mode {self.mode!r}")

    def prompt_length_range(self, n: int) -> tuple[int, int]:
        lo = math.ceil(self.prompt_frac_min * n)
        hi = math.floor(self.prompt_frac_max * n)
        if lo > hi:
            raise InvalidConfigError(
                f"prompt fraction range [{self.prompt_frac_min}, "
                f"{self.prompt_frac_max}] contains no integer prompt length "
                f"for N={n}"
            )
        return lo, hi


def canonicalize_ordering(prompt_positions: Iterable[int], n: int) -> Ordering:
    """Build the canonical ordering for a prompt position set.

    Prompt positions come first, ascending; the remaining positions follow,
    also ascending.
    """
    prompt = sorted(int(p) for p in prompt_positions)
    if any(p < 0 or p >= n for p in prompt):
        raise InvalidInputError(f"prompt positions must lie in [0, {n})")
    if len(set(prompt)) != len(prompt):
        raise InvalidInputError("duplicate prompt positions")
    in_prompt = np.zeros(n, dtype=bool)
    in_prompt[prompt] = True
    rest = np.flatnonzero(~in_prompt)
    sigma = np.concatenate([np.asarray(prompt, dtype=np.int64), rest])
    return Ordering(sigma, len(prompt))


def _ordering_from_raw(sigma_pre: np.ndarray, m: int, mode: str) -> Ordering:
    if mode == ANY_PERMUTATION:
        return Ordering(sigma_pre, m)
    return canonicalize_ordering(sigma_pre[:m], sigma_pre.shape[0])


def sample_mask_pattern(
    cfg: MaskDistributionConfig, n: int, rng: np.random.Generator
) -> Ordering:
    """Draw one ordering: prompt length uniform on the integer range, prompt
    positions uniform without replacement, then canonicalized (unless the
    config asks for raw permutations)."""
    if n < 1:
        raise InvalidInputError("sequence length must be >= 1")
    lo, hi = cfg.prompt_length_range(n)
    m = int(rng.integers(lo, hi + 1))
    sigma_pre = rng.permutation(n)
    return _ordering_from_raw(sigma_pre, m, cfg.mode)


def sample_mask_patterns(
    cfg: MaskDistributionConfig, n: int, batch: int, rng: np.random.Generator
) -> list[Ordering]:
    """Draw a batch of orderings.

    With ``cfg.stratified`` the prompt-length range is split into ``batch``
    equal-width strata and each ordering takes one uniform draw from its own
    stratum (stratum order shuffled), which pins the batch's spread of
    prompt lengths.  Otherwise this is ``batch`` independent draws.
    """
    if not cfg.stratified:
        return [sample_mask_pattern(cfg, n, rng) for _ in range(batch)]
    lo, hi = cfg.prompt_length_range(n)
    span = hi - lo + 1
    strata = rng.permutation(batch)
    out = []
    for b in strata:
        u = (b + rng.random()) / batch
        m = lo + min(int(u * span), span - 1)
        sigma_pre = rng.permutation(n)
        out.append(_ordering_from_raw(sigma_pre, m, cfg.mode))
    return out


def build_query_mask(ordering: Ordering) -> np.ndarray:
    """Strict decode-causal mask: position r may attend to c iff c's decode
    rank is strictly lower.  The diagonal is all zero."""
    ranks = ordering.ranks
    return (ranks[:, None] > ranks[None, :]).astype(np.uint8)


def build_content_mask(ordering: Ordering) -> np.ndarray:
    """Query mask plus the diagonal: a position's content state may also
    read its own token value."""
    ranks = ordering.ranks
    return (ranks[:, None] >= ranks[None, :]).astype(np.uint8)
