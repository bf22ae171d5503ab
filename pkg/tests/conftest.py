# Ensure project root is on sys.path for imports when running pytest directly.
import copy
import sys
from pathlib import Path

import pytest

root = Path(__file__).resolve().parents[1]
if str(root) not in sys.path:
    sys.path.insert(0, str(root))

from src import config as config_mod  # noqa: E402
from src.data import load_dataset  # noqa: E402
from src.harness import train_teacher  # noqa: E402

BASE_CONFIG = {
    "dataset": {
        "kind": "synthetic",
        "synthetic": {"num_classes": 3, "n_per_class": 40, "n_test_per_class": 20, "dim": 6, "separation": 4.0, "seed": 0},
    },
    "student": {"model": {"family": "mlp", "depth": 1, "base_width": 16, "num_classes": 3, "input_shape": [1, 1, 6]}},
    "teacher_model": {"family": "mlp", "depth": 1, "base_width": 32, "num_classes": 3, "input_shape": [1, 1, 6]},
    "quantizer": {"bits": 2, "delta_policy": "l2-optimal"},
    "distill": {"tau": 2.0, "lambda_policy": {"kind": "constant", "value": 0.0}},
    "optimizer": {"lr": 0.05, "batch_size": 16, "teacher_epochs": 3, "student_epochs": 2},
    "seeds": [1],
}


def deep_merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@pytest.fixture
def config_data(tmp_path):
    """Factory for raw config dicts over a tiny synthetic problem."""

    def make(**overrides):
        data = deep_merge(BASE_CONFIG, {"out_dir": str(tmp_path / "runs")})
        return deep_merge(data, overrides)

    return make


@pytest.fixture
def make_config(config_data):
    def make(**overrides):
        return config_mod.from_dict(config_data(**overrides))

    return make


@pytest.fixture
def datasets(make_config):
    return load_dataset(make_config().dataset)


@pytest.fixture
def teacher_path(make_config, datasets, tmp_path):
    """A float teacher trained on the synthetic clusters, saved under tmp_path/zoo."""
    path = tmp_path / "zoo" / "teacher_w1.qkdc"
    train_teacher(make_config(), seed=0, out_path=path, datasets=datasets, epochs=15)
    return path
