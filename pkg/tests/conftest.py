import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.config import DatasetSpec, NetConfig, RunConfig, TrainConfig  # noqa: E402
from src.grid import Mask, Volume  # noqa: E402
from src.synth import Sample, generate  # noqa: E402


def tiny_document(output_dir: Path) -> dict:
    """Smallest run that still exercises every stage."""
    return {
        "dataset": {"n_id": 12, "n_ood": 3, "shape": [32, 32], "seed": 7, "sigma": 2.0},
        "net": {"levels": 2, "base_channels": 4, "growth": 2, "convs_per_block": 1},
        "train": {"epochs": 1, "batch_size": 2, "patch_size": [32, 32], "patches_per_patient": 1, "seed": 3},
        "cv": {"n_folds": 2, "outer": 1, "val": 2, "test": 3, "seed": 5},
        "uq": {"mcdo_probs": [0.2], "mcdo_passes": 2, "de_models": 2, "seed": 11},
        "output_dir": str(output_dir),
    }


@pytest.fixture
def run_config(tmp_path) -> RunConfig:
    return RunConfig.model_validate(tiny_document(tmp_path / "run"))


@pytest.fixture(scope="session")
def tiny_spec() -> DatasetSpec:
    return DatasetSpec(n_id=12, n_ood=3, shape=[32, 32], seed=7, sigma=2.0)


@pytest.fixture(scope="session")
def tiny_samples(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture(scope="session")
def id_samples(tiny_samples):
    return [s for s in tiny_samples if s.family == "ID"]


@pytest.fixture
def net_config() -> NetConfig:
    return NetConfig(levels=2, base_channels=4, growth=2, convs_per_block=1, in_channels=7)


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(epochs=1, batch_size=2, patch_size=[32, 32], patches_per_patient=1, seed=3)


def make_box_sample(shape=(8, 8), sample_id="box_000", with_dose=True) -> Sample:
    """Hand-built sample: square body, nested targets in the middle, three OARs in the corners."""
    body = np.zeros(shape, dtype=np.uint8)
    body[1:-1, 1:-1] = 1
    tv_low = np.zeros(shape, dtype=np.uint8)
    tv_low[3:5, 3:5] = 1
    tv_high = np.zeros(shape, dtype=np.uint8)
    tv_high[3, 3] = 1
    oars = {}
    for k, (i, j) in enumerate([(1, 1), (1, shape[1] - 2), (shape[0] - 2, 1)]):
        m = np.zeros(shape, dtype=np.uint8)
        m[i, j] = 1
        oars[f"oar{k}"] = Mask(m)
    ct = np.where(body == 1, np.linspace(0.1, 0.9, body.size).reshape(shape), 0.0)
    dose = np.where(body == 1, 20.0, 0.0) if with_dose else None
    return Sample(
        id=sample_id,
        family="ID",
        ct=Volume(ct),
        body=Mask(body),
        tv_high=Mask(tv_high),
        tv_low=Mask(tv_low),
        oars=oars,
        dose=Volume(dose) if dose is not None else None,
    )


@pytest.fixture
def box_sample() -> Sample:
    return make_box_sample()
