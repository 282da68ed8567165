"""Explicit joint probability table: the brute-force oracle model.

Stores the full joint over ``V**N`` sequences, so every conditional any
sampler might ask for can be answered exactly by slicing and summing.
Deliberately capped in size; this exists to verify samplers, not to scale.
"""

from __future__ import annotations

import json
import math
from typing import Mapping, Sequence

import numpy as np

from ..errors import InvalidInputError, ZeroMassConditioningError
from ..ordering import Ordering
from .base import AnyOrderModel, as_token_array

DEFAULT_CELL_CAP = 10**6


class TabularJointModel(AnyOrderModel):
    def __init__(
        self,
        vocab_size: int,
        seq_len: int,
        probs: Sequence[float] | np.ndarray,
        *,
        cell_cap: int = DEFAULT_CELL_CAP,
    ):
        if vocab_size < 1 or seq_len < 1:
            raise InvalidInputError("need vocab_size >= 1 and seq_len >= 1")
        cells = vocab_size**seq_len
        if cells > cell_cap:
            raise InvalidInputError(
                f"table would need {cells} cells, above the cap of {cell_cap}"
            )
        table = np.asarray(probs, dtype=np.float64).reshape(-1)
        if table.shape[0] != cells:
            raise InvalidInputError(
                f"expected {cells} probabilities, got {table.shape[0]}"
            )
        if (table < 0).any():
            raise InvalidInputError("joint table has negative mass")
        total = float(table.sum())
        if abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"joint table sums to {total}, not 1")
        self.vocab_size = int(vocab_size)
        self.seq_len = int(seq_len)
        self.table = table.reshape((vocab_size,) * seq_len)
        self.table.setflags(write=False)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_json(cls, text: str | Mapping) -> "TabularJointModel":
        obj = json.loads(text) if isinstance(text, str) else text
        return cls(obj["v"], obj["n"], obj["probs"])

    def to_json(self) -> str:
        return json.dumps(
            {"v": self.vocab_size, "n": self.seq_len, "probs": self.table.reshape(-1).tolist()}
        )

    @classmethod
    def random(
        cls, vocab_size: int, seq_len: int, rng: np.random.Generator, concentration: float = 1.0
    ) -> "TabularJointModel":
        """Dirichlet-random table with a tiny floor so no cell is exactly zero."""
        cells = vocab_size**seq_len
        raw = rng.dirichlet(np.full(cells, concentration)) + 1e-9
        return cls(vocab_size, seq_len, raw / raw.sum())

    @classmethod
    def from_marginals(cls, marginals: Sequence[Sequence[float]]) -> "TabularJointModel":
        """Product of independent per-position marginals."""
        mats = [np.asarray(m, dtype=np.float64) for m in marginals]
        v = mats[0].shape[0]
        if any(m.shape != (v,) for m in mats):
            raise InvalidInputError("all marginals must share one vocabulary size")
        table = mats[0]
        for m in mats[1:]:
            table = np.multiply.outer(table, m)
        return cls(v, len(mats), table.reshape(-1))

    @classmethod
    def correlated(cls, vocab_size: int, seq_len: int) -> "TabularJointModel":
        """All mass spread evenly over the constant sequences (v, v, ..., v)."""
        table = np.zeros((vocab_size,) * seq_len)
        for v in range(vocab_size):
            table[(v,) * seq_len] = 1.0 / vocab_size
        return cls(vocab_size, seq_len, table.reshape(-1))

    @classmethod
    def point_mass(cls, tokens: Sequence[int], vocab_size: int) -> "TabularJointModel":
        tokens = tuple(int(t) for t in tokens)
        table = np.zeros((vocab_size,) * len(tokens))
        table[tokens] = 1.0
        return cls(vocab_size, len(tokens), table.reshape(-1))

    # -- exact conditionals ----------------------------------------------------

    def conditional(self, conditioning: Mapping[int, int], position: int) -> np.ndarray:
        """Exact ``p(x_position = . | conditioning)`` by table marginalization.

        This single routine backs both model views, so the window's first
        chained conditional and the draft marginal for the same position are
        computed through an identical float path.
        """
        if position in conditioning:
            raise InvalidInputError(f"position {position} is already conditioned on")
        idx: list[object] = [slice(None)] * self.seq_len
        for pos, val in conditioning.items():
            idx[pos] = int(val)
        sub = self.table[tuple(idx)]
        remaining = sorted(p for p in range(self.seq_len) if p not in conditioning)
        axis = remaining.index(position)
        other_axes = tuple(a for a in range(sub.ndim) if a != axis)
        vec = sub.sum(axis=other_axes) if other_axes else sub.copy()
        denom = vec.sum()
        if denom <= 0.0:
            raise ZeroMassConditioningError(
                f"conditioning event {dict(conditioning)} has zero probability"
            )
        return vec / denom

    def _marginals(self, tokens, ordering, n_visible, queries):
        visible = {int(p): int(tokens[p]) for p in ordering.sigma[:n_visible]}
        return np.stack([self.conditional(visible, q) for q in queries])

    def _chained(self, tokens, ordering, start, stop):
        conditioning = {int(p): int(tokens[p]) for p in ordering.sigma[:start]}
        rows = []
        for i in range(start, stop):
            pos = int(ordering.sigma[i])
            rows.append(self.conditional(conditioning, pos))
            conditioning[pos] = int(tokens[pos])
        return np.stack(rows) if rows else np.zeros((0, self.vocab_size))

    def exact_joint_conditional(self, ordering: Ordering, tokens: np.ndarray) -> float:
        """Exact log of ``p(values at sigma[m:] | values at sigma[:m])``.

        ``tokens`` must specify a value at every position; prompt and fill
        together cover the whole sequence.
        """
        tokens = as_token_array(tokens)
        self.validate_tokens(tokens)
        if (tokens == self.mask_id).any():
            raise InvalidInputError("all positions must carry values")
        prompt_idx: list[object] = [slice(None)] * self.seq_len
        for pos in ordering.sigma[: ordering.m]:
            prompt_idx[int(pos)] = int(tokens[pos])
        prompt_mass = float(np.sum(self.table[tuple(prompt_idx)]))
        if prompt_mass <= 0.0:
            raise ZeroMassConditioningError("prompt has zero probability")
        full_mass = float(self.table[tuple(int(t) for t in tokens)])
        if full_mass == 0.0:
            return -math.inf
        return math.log(full_mass) - math.log(prompt_mass)

    def left_to_right_log_probs(self, tokens: Sequence[int]) -> np.ndarray:
        """ln p(x_i | x_{<i}) for every position, for use as a perplexity
        reference."""
        tokens = as_token_array(tokens)
        out = np.empty(tokens.shape[0])
        conditioning: dict[int, int] = {}
        for i, val in enumerate(tokens):
            vec = self.conditional(conditioning, i)
            p = float(vec[int(val)])
            out[i] = math.log(p) if p > 0 else -math.inf
            conditioning[i] = int(val)
        return out

    def exact_masked_joint(self, ordering: Ordering, prompt_tokens: np.ndarray) -> np.ndarray:
        """Exact conditional joint over the masked block, flattened in decode
        order (first masked rank is the most significant digit).

        Requires a canonical ordering so that decode order equals ascending
        position order inside the masked block.
        """
        if not ordering.is_canonical():
            raise InvalidInputError("exact masked joint needs a canonical ordering")
        prompt_tokens = as_token_array(prompt_tokens)
        idx: list[object] = [slice(None)] * self.seq_len
        for pos in ordering.sigma[: ordering.m]:
            idx[int(pos)] = int(prompt_tokens[pos])
        sub = np.asarray(self.table[tuple(idx)], dtype=np.float64).reshape(-1)
        denom = sub.sum()
        if denom <= 0.0:
            raise ZeroMassConditioningError("prompt has zero probability")
        return sub / denom
