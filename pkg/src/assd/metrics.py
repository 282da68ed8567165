"""Distribution-fidelity and sequence-quality metrics.

The chi-square p-value is computed from a self-contained implementation of
the regularized incomplete gamma function (series for small arguments,
continued fraction otherwise), so the runtime needs no statistics library.

``generative_perplexity`` follows the standard geometric-mean definition
``exp(-(1/N) * sum(ln q))``: the per-token average sits inside the
exponent's sign rather than outside the exponential.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import InvalidInputError

_GAMMA_TOL = 1e-12
_GAMMA_MAX_ITER = 10_000


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) for a > 0, x >= 0."""
    if a <= 0:
        raise InvalidInputError("shape parameter must be positive")
    if x < 0:
        raise InvalidInputError("argument must be non-negative")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    denom = a
    for _ in range(_GAMMA_MAX_ITER):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _GAMMA_TOL:
            break
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    return total * math.exp(log_prefix)


def _gamma_q_contfrac(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    f = d
    for i in range(1, _GAMMA_MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        f *= delta
        if abs(delta - 1.0) < _GAMMA_TOL:
            break
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    return math.exp(log_prefix) * f


class EmpiricalDistribution:
    """Outcome -> count map with an associative, commutative merge, so
    partial counts from concurrent workers can be reduced in any order."""

    __slots__ = ("counts",)

    def __init__(self, counts: Mapping | None = None):
        self.counts: dict = {}
        if counts:
            for key, value in counts.items():
                self.add(key, value)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, outcome, count: int = 1) -> None:
        if count <= 0:
            raise InvalidInputError("counts must be positive")
        self.counts[outcome] = self.counts.get(outcome, 0) + int(count)

    def merge(self, other: "EmpiricalDistribution") -> "EmpiricalDistribution":
        out = EmpiricalDistribution(self.counts)
        for key, value in other.counts.items():
            out.add(key, value)
        return out

    @classmethod
    def from_bincount(cls, counts: np.ndarray) -> "EmpiricalDistribution":
        dist = cls()
        for outcome in np.flatnonzero(counts):
            dist.add(int(outcome), int(counts[outcome]))
        return dist

    def probs(self) -> dict:
        total = self.total
        return {k: v / total for k, v in self.counts.items()}


def _as_probs(dist) -> dict:
    if isinstance(dist, EmpiricalDistribution):
        return dist.probs()
    total = float(sum(dist.values()))
    if total <= 0:
        raise InvalidInputError("distribution has no mass")
    return {k: v / total for k, v in dist.items()}


def total_variation(a, b) -> float:
    """Half the L1 distance between two (normalized) distributions over the
    union of their outcomes."""
    pa, pb = _as_probs(a), _as_probs(b)
    keys = set(pa) | set(pb)
    return 0.5 * sum(abs(pa.get(k, 0.0) - pb.get(k, 0.0)) for k in keys)


def shannon_entropy(tokens: Sequence[int] | np.ndarray) -> float:
    """Entropy (bits) of the within-sequence token frequency distribution."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise InvalidInputError("entropy of an empty sequence")
    _, counts = np.unique(tokens, return_counts=True)
    freqs = counts / tokens.size
    return float(-(freqs * np.log2(freqs)).sum())


class SequenceReference(Protocol):
    def left_to_right_log_probs(self, tokens: Sequence[int]) -> np.ndarray: ...


def generative_perplexity(tokens: Sequence[int] | np.ndarray, reference: SequenceReference) -> float:
    """exp of the negative mean reference log-density of the sequence."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise InvalidInputError("perplexity of an empty sequence")
    logs = np.asarray(reference.left_to_right_log_probs(tokens))
    if not np.isfinite(logs).all():
        warnings.warn("reference assigns zero density; perplexity is infinite", stacklevel=2)
        return math.inf
    return float(np.exp(-logs.mean()))


@dataclass
class ChiSquareResult:
    statistic: float
    dof: int
    p_value: float
    n_cells: int
    n_pooled: int

    def rejected(self, alpha: float) -> bool:
        return self.p_value < alpha


def chi_square_gof(observed, expected_probs: Mapping, *, min_expected: float = 5.0) -> ChiSquareResult:
    """Pearson goodness-of-fit of observed counts against expected cell
    probabilities.

    Cells whose expected count falls below ``min_expected`` are pooled into
    a single catch-all cell; if the catch-all itself stays too small it is
    merged into the smallest surviving cell.  Degrees of freedom are the
    final cell count minus one; a single surviving cell degenerates to
    statistic 0 and p-value 1.
    """
    counts = observed.counts if isinstance(observed, EmpiricalDistribution) else dict(observed)
    total = float(sum(counts.values()))
    if total <= 0:
        raise InvalidInputError("no observations")
    keys = sorted(set(expected_probs) | set(counts))
    obs = np.array([counts.get(k, 0) for k in keys], dtype=np.float64)
    exp = np.array([expected_probs.get(k, 0.0) for k in keys], dtype=np.float64) * total

    small = exp < min_expected
    n_pooled = int(small.sum())
    obs_cells = list(obs[~small])
    exp_cells = list(exp[~small])
    if small.any():
        pooled_obs, pooled_exp = obs[small].sum(), exp[small].sum()
        if pooled_exp < min_expected and exp_cells:
            j = int(np.argmin(exp_cells))
            obs_cells[j] += pooled_obs
            exp_cells[j] += pooled_exp
        else:
            obs_cells.append(pooled_obs)
            exp_cells.append(pooled_exp)

    obs_arr, exp_arr = np.asarray(obs_cells), np.asarray(exp_cells)
    keep = ~((exp_arr == 0) & (obs_arr == 0))
    obs_arr, exp_arr = obs_arr[keep], exp_arr[keep]
    if (exp_arr == 0).any():
        return ChiSquareResult(math.inf, max(0, obs_arr.size - 1), 0.0, obs_arr.size, n_pooled)
    stat = float(((obs_arr - exp_arr) ** 2 / exp_arr).sum())
    dof = obs_arr.size - 1
    if dof <= 0:
        return ChiSquareResult(0.0, 0, 1.0, obs_arr.size, n_pooled)
    return ChiSquareResult(stat, dof, regularized_gamma_q(dof / 2.0, stat / 2.0), obs_arr.size, n_pooled)


def mean_and_se(values: Sequence[float] | np.ndarray) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


@dataclass
class MetricsReport:
    """One row of a decoder-comparison table."""

    sampler: str
    gen_ppl_mean: float
    gen_ppl_se: float
    entropy_mean: float
    entropy_se: float
    model_nfe_mean: float
    model_nfe_se: float
    aux_nfe_mean: float
    aux_nfe_se: float
    tokens_per_oracle_iter: float
    tv_distance: float | None = None
    chi2_stat: float | None = None
    chi2_dof: int | None = None
    chi2_p: float | None = None
    wall_time_s: float = 0.0

    CSV_COLUMNS = (
        "sampler,gen_ppl_mean,gen_ppl_se,entropy_mean,entropy_se,"
        "model_nfe_mean,model_nfe_se,aux_nfe_mean,aux_nfe_se,"
        "tokens_per_oracle_iter,tv_distance,chi2_stat,chi2_dof,chi2_p,wall_time_s"
    )

    def to_csv_row(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return ",".join(
            fmt(getattr(self, col)) for col in self.CSV_COLUMNS.split(",")
        )

    def to_json_dict(self) -> dict:
        return {col: getattr(self, col) for col in self.CSV_COLUMNS.split(",")}
