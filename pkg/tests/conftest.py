import copy
from pathlib import Path

import pytest

from homofilter.models.model_file import ModelFile
from homofilter.services.model_service import build_model, normalize_correlation

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SCALAR_DIMS = {"m": 1, "n": 1, "d": 1, "w": 1, "v": 1, "u": 1}

OU_BENCHMARK = {
    "dims": SCALAR_DIMS,
    "epsilon": 0.25,
    "b": ["-x1 + 0.5 * z1"],
    "sigma": [[1.0]],
    "f": {"builtin": "ou", "params": {"theta": 1.0}},
    "g": [["sqrt(2)"]],
    "h": ["tanh(x1) + 0.5 * tanh(z1)"],
    "alpha": [[0.5]],
    "gamma": [[0.8660254037844386]],
    "initial_law": {
        "x": [{"kind": "gaussian", "mean": 0.0, "std": 0.5}],
        "z": [{"kind": "gaussian", "mean": 0.0, "std": 1.0}],
    },
}

Z_FREE = {
    **OU_BENCHMARK,
    "b": ["-x1"],
    "h": ["tanh(x1)"],
}

LINEAR = {
    **OU_BENCHMARK,
    "b": {"builtin": "linear", "params": {"A": [[-1.0]]}},
    "h": {"builtin": "linear", "params": {"A": [[1.0]]}},
    "initial_law": {
        "x": [{"kind": "gaussian", "mean": 0.0, "std": 1.0}],
        "z": [{"kind": "point", "value": 0.0}],
    },
    "unsafe_unbounded": True,
}


def make_model(doc: dict, normalized: bool = True, **changes):
    """Build a model from a document dict with top-level keys replaced."""
    raw = copy.deepcopy(doc)
    raw.update(changes)
    model = build_model(ModelFile.model_validate(raw))
    return normalize_correlation(model) if normalized else model


@pytest.fixture
def ou_model():
    return make_model(OU_BENCHMARK)


@pytest.fixture
def zfree_model():
    return make_model(Z_FREE)


@pytest.fixture
def configs_dir():
    return CONFIGS
