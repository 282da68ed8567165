"""Joint-table fixtures for hermetic verification runs.

Each fixture ships in-repo as JSON (with its generating seed recorded) and
can be regenerated bit-for-bit from the registry below, so a test can prove
the shipped files match their recipes.  Dimensions are chosen to keep the
outcome space small enough that empirical-vs-exact comparisons have
statistical power at a few hundred thousand samples.

The product fixture uses dyadic marginals on purpose: its conditionals are
then exact binary fractions, so the draft and oracle distributions of a
self-drafted decode agree bitwise at every rank and every draft must be
accepted.
"""

from __future__ import annotations

import json
from importlib import resources
from typing import Callable

import numpy as np

from ..errors import InvalidConfigError
from ..models.tabular import TabularJointModel


def _random(v: int, n: int, seed: int, concentration: float = 1.0) -> TabularJointModel:
    return TabularJointModel.random(v, n, np.random.default_rng(seed), concentration)


_REGISTRY: dict[str, Callable[[], TabularJointModel]] = {
    "random-n3-v2": lambda: _random(2, 3, seed=101),
    "random-n4-v3": lambda: _random(3, 4, seed=102),
    "random-n5-v2": lambda: _random(2, 5, seed=103),
    "correlated-n3-v2": lambda: TabularJointModel.correlated(2, 3),
    "product-n4-v2": lambda: TabularJointModel.from_marginals(
        [[0.75, 0.25], [0.5, 0.5], [0.25, 0.75], [0.625, 0.375]]
    ),
    "neardet-n3-v4": lambda: _random(4, 3, seed=106, concentration=0.05),
    "correlated-n2-v2": lambda: TabularJointModel.correlated(2, 2),
}

# the distribution-equivalence matrix runs over these; correlated-n2-v2 is
# kept aside as the mean-field counterexample
MATRIX_FIXTURES = (
    "random-n3-v2",
    "random-n4-v3",
    "random-n5-v2",
    "correlated-n3-v2",
    "product-n4-v2",
    "neardet-n3-v4",
)


def fixture_names() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def make_fixture(name: str) -> TabularJointModel:
    """Rebuild a fixture from its recipe (not from the shipped file)."""
    if name not in _REGISTRY:
        raise InvalidConfigError(f"unknown fixture {name!r}")
    return _REGISTRY[name]()


def load_fixture(name: str) -> TabularJointModel:
    """Load a fixture from the JSON shipped inside the package."""
    if name not in _REGISTRY:
        raise InvalidConfigError(f"unknown fixture {name!r}")
    path = resources.files("assd.fixtures").joinpath(f"{name}.json")
    return TabularJointModel.from_json(path.read_text())


def write_fixture_files(directory) -> list[str]:
    """Regenerate the shipped fixture JSONs (maintenance helper)."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in fixture_names():
        model = make_fixture(name)
        payload = {
            "name": name,
            "v": model.vocab_size,
            "n": model.seq_len,
            "probs": model.table.reshape(-1).tolist(),
        }
        path = directory / f"{name}.json"
        path.write_text(json.dumps(payload))
        written.append(str(path))
    return written
