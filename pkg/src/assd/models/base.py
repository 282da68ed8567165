"""Density-model contract shared by every sampler.

A model exposes two views of the same learned joint:

* ``marginals_given_visible`` — per-position distributions conditioned only
  on the already-decoded prefix of an ordering (conditionally independent
  across queried positions; one network evaluation).
* ``chained_conditionals`` — for a window of decode ranks, the distribution
  of each rank's token conditioned on the decoded prefix plus the window's
  earlier (speculated) values; also one network evaluation thanks to the
  decode-causal attention mask.

Token sequences are int arrays over ``{0, ..., vocab_size-1}`` plus the
reserved ``mask_id == vocab_size`` sentinel for not-yet-decoded positions.

Callers, not models, account for evaluations: one call to either method
costs one model NFE regardless of how many positions it answers for.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Sequence

import numpy as np

from ..errors import ContractViolation, InvalidInputError
from ..ordering import Ordering

PROB_TOL = 1e-9


def check_prob_vector(vec: np.ndarray, tol: float = PROB_TOL) -> None:
    if vec.ndim != 1:
        raise InvalidInputError("probability vector must be one-dimensional")
    if (vec < 0).any():
        raise InvalidInputError("probability vector has negative entries")
    total = float(vec.sum())
    if abs(total - 1.0) > tol:
        raise InvalidInputError(f"probability vector sums to {total}, not 1")


def as_token_array(tokens: Sequence[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1:
        raise InvalidInputError("token sequence must be one-dimensional")
    return arr


class AnyOrderModel(ABC):
    """Interface every decoder works against."""

    vocab_size: int
    seq_len: int

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def validate_tokens(self, tokens: np.ndarray) -> None:
        if tokens.shape != (self.seq_len,):
            raise InvalidInputError(
                f"expected {self.seq_len} tokens, got shape {tokens.shape}"
            )
        bad = (tokens < 0) | (tokens > self.mask_id)
        if bad.any():
            raise InvalidInputError("token id outside vocabulary and mask sentinel")

    def marginals_given_visible(
        self, tokens: np.ndarray, ordering: Ordering, n_visible: int, queries: Sequence[int]
    ) -> np.ndarray:
        """Distributions at ``queries`` conditioned only on the first
        ``n_visible`` decode ranks of ``ordering``.  Returns ``(Q, V)``."""
        tokens = as_token_array(tokens)
        self.validate_tokens(tokens)
        visible = ordering.sigma[:n_visible]
        if (tokens[visible] == self.mask_id).any():
            raise ContractViolation("visible positions must carry token values")
        queries = [int(q) for q in queries]
        for q in queries:
            if tokens[q] != self.mask_id:
                raise ContractViolation(f"query position {q} is already visible")
        return self._marginals(tokens, ordering, n_visible, queries)

    def chained_conditionals(
        self, tokens: np.ndarray, ordering: Ordering, start: int, stop: int
    ) -> np.ndarray:
        """Row ``i - start`` is the distribution of the token at decode rank
        ``i`` conditioned on ranks ``< start`` (committed) and the values the
        sequence carries at ranks ``[start, i)``.  Returns
        ``(stop - start, V)``."""
        tokens = as_token_array(tokens)
        self.validate_tokens(tokens)
        if not 0 <= start <= stop <= ordering.n:
            raise InvalidInputError(f"bad rank window [{start}, {stop})")
        window = ordering.sigma[start:stop]
        if (tokens[window] == self.mask_id).any():
            raise ContractViolation("window positions must carry draft values")
        prefix = ordering.sigma[:start]
        if (tokens[prefix] == self.mask_id).any():
            raise ContractViolation("committed prefix carries a masked position")
        return self._chained(tokens, ordering, start, stop)

    @abstractmethod
    def _marginals(
        self, tokens: np.ndarray, ordering: Ordering, n_visible: int, queries: list[int]
    ) -> np.ndarray: ...

    @abstractmethod
    def _chained(
        self, tokens: np.ndarray, ordering: Ordering, start: int, stop: int
    ) -> np.ndarray: ...
