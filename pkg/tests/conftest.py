# tests/conftest.py

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

os.environ.setdefault("AGRG_NO_PROGRESS", "1")

from agrg.config import RunConfig
from agrg.ingestion.synth import LabelRegistry, synthesize_case

TINY_SHAPE = (8, 16, 16)


def tiny_config_dict(tmp_path) -> dict:
    return {
        "seed": 0,
        "dataset": {"k": 3, "shape": list(TINY_SHAPE), "p": 0.5, "raw_jitter": 1,
                    "n_train": 24, "n_val": 12, "n_test": 8, "base_seed": 100},
        "encoder": {"patch": 4, "d_h": 16, "layers": 1},
        "heads": {"d_i": 8},
        "decoder": {"layers": 1, "heads": 2, "d_t": 16, "max_positions": 32, "max_gen_len": 20, "beam": 2},
        "training": {
            "pretrain": {"lr": 1e-2, "batch_size": 8, "epochs": 2},
            "heads": {"lr": 1e-3, "head_lr": 1e-2, "batch_size": 8, "epochs": 1},
            "decoder": {"lr": 1e-2, "batch_size": 16, "epochs": 2, "weight_decay": 0.01},
        },
        "paths": {"data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "runs")},
    }


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return RunConfig.from_dict(tiny_config_dict(tmp_path))


@pytest.fixture
def registry() -> LabelRegistry:
    return LabelRegistry.default(3)


@pytest.fixture
def tiny_cases(registry):
    return [synthesize_case(seed, registry, p=0.5, shape=TINY_SHAPE, raw_jitter=1) for seed in range(6)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
