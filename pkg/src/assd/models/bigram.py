"""Context bigram draft model.

Counts adjacent (left, right) pairs over the non-masked part of a sequence
and drafts each token from the conditional of its left neighbour.  During a
decode the left neighbour is either already committed or was speculated
earlier in the same window; canonical orderings make the speculated value
available by construction.  Position 0 and unseen conditioning values fall
back to the uniform distribution.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ContractViolation, InvalidInputError
from ..ordering import Ordering
from .base import as_token_array


class BigramCounts:
    """Pair counts ``pair_counts[b, a]`` = number of occurrences of value
    ``b`` immediately followed by value ``a`` (both non-masked).  The
    left-element totals are derived, so they always match the pair table."""

    __slots__ = ("vocab_size", "pair_counts")

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise InvalidInputError("vocab_size must be >= 1")
        self.vocab_size = int(vocab_size)
        self.pair_counts = np.zeros((vocab_size, vocab_size), dtype=np.int64)

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def unigram_counts(self) -> np.ndarray:
        """Occurrences of each value as a pair's left element."""
        return self.pair_counts.sum(axis=1)

    @classmethod
    def build(cls, tokens: Sequence[int] | np.ndarray, vocab_size: int) -> "BigramCounts":
        """Sweep a (possibly partially masked) sequence for adjacent pairs."""
        counts = cls(vocab_size)
        tokens = as_token_array(tokens)
        left, right = tokens[:-1], tokens[1:]
        ok = (left != counts.mask_id) & (right != counts.mask_id)
        np.add.at(counts.pair_counts, (left[ok], right[ok]), 1)
        return counts

    def add_pair(self, left: int, right: int) -> None:
        self.pair_counts[left, right] += 1

    def observe_commit(self, tokens: np.ndarray, position: int) -> None:
        """Record the pairs a freshly committed position completes.

        Call in ascending position order when several tokens commit at once;
        each adjacent pair is then counted exactly once.
        """
        value = int(tokens[position])
        if value == self.mask_id:
            raise ContractViolation("committed position still masked")
        if position > 0 and tokens[position - 1] != self.mask_id:
            self.add_pair(int(tokens[position - 1]), value)
        if position + 1 < tokens.shape[0] and tokens[position + 1] != self.mask_id:
            self.add_pair(value, int(tokens[position + 1]))

    def conditional(self, left_value: int | None) -> np.ndarray:
        """``c(. | left_value)``; uniform when the value was never seen as a
        left element (or there is no left neighbour at all)."""
        v = self.vocab_size
        if left_value is None:
            return np.full(v, 1.0 / v)
        row = self.pair_counts[int(left_value)]
        total = row.sum()
        if total == 0:
            return np.full(v, 1.0 / v)
        return row / total

    def left_to_right_log_probs(self, tokens: Sequence[int] | np.ndarray) -> np.ndarray:
        """ln c(x_i | x_{i-1}) per position (uniform at position 0), for use
        as a held-out perplexity reference."""
        tokens = as_token_array(tokens)
        out = np.empty(tokens.shape[0])
        for i, val in enumerate(tokens):
            dist = self.conditional(None if i == 0 else int(tokens[i - 1]))
            p = float(dist[int(val)])
            out[i] = math.log(p) if p > 0 else -math.inf
        return out


def draft_window(
    counts: BigramCounts,
    ordering: Ordering,
    tokens: np.ndarray,
    start: int,
    stop: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Speculate values for decode ranks ``[start, stop)``.

    Returns ``(values, densities)`` where ``densities[j]`` is the full
    conditional each value was sampled from.  Raises if a conditioning value
    would be masked, which canonical orderings make impossible.
    """
    from ..sampler import sample_categorical  # local import to avoid a cycle

    window = stop - start
    values = np.empty(window, dtype=np.int64)
    densities = np.empty((window, counts.vocab_size))
    speculated: dict[int, int] = {}
    for j in range(window):
        pos = int(ordering.sigma[start + j])
        if pos == 0:
            cond = None
        elif tokens[pos - 1] != counts.mask_id:
            cond = int(tokens[pos - 1])
        else:
            if pos - 1 not in speculated:
                raise ContractViolation(
                    f"conditioning value for position {pos} is masked and was "
                    "not speculated earlier in the window"
                )
            cond = speculated[pos - 1]
        if cond is not None and cond == counts.mask_id:
            raise ContractViolation("bigram conditioning value is the mask sentinel")
        dist = counts.conditional(cond)
        values[j] = sample_categorical(dist, rng.random())
        densities[j] = dist
        speculated[pos] = int(values[j])
    return values, densities
