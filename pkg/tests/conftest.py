import numpy as np
import pytest

from vlplab.config import TrainConfig, apply_overrides
from vlplab.evaldata import DataConfig, collect, generate_synthetic_dataset, load_dataset, load_prompts
from vlplab.model import ModelConfig

SMALL_MODEL = {"stem_dim": 8, "encoder_hidden": 16, "embed_dim": 12, "vocab_buckets": 64,
               "token_dim": 8, "proj_hidden": 16, "proj_dim": 8}


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Tiny synthetic dataset: 9 classes, 4 train and 2 held-out per class."""
    root = tmp_path_factory.mktemp("small_data")
    generate_synthetic_dataset(root, DataConfig(samples_per_class=4, heldout_per_class=2, image_size=16))
    return {"root": root, "train": collect(load_dataset(root / "train")),
            "heldout": collect(load_dataset(root / "heldout")), "prompts": load_prompts(root / "prompts.json")}


@pytest.fixture(scope="session")
def default_data(tmp_path_factory):
    """The default synthetic dataset (900 train / 180 held-out, 32x32)."""
    root = tmp_path_factory.mktemp("default_data")
    generate_synthetic_dataset(root, DataConfig())
    return {"root": root, "train": collect(load_dataset(root / "train")),
            "heldout": collect(load_dataset(root / "heldout")), "prompts": load_prompts(root / "prompts.json")}


def small_config(**train) -> TrainConfig:
    """Fast config for 16x16 images and a tiny model."""
    base = {"train": {"batch_size": 8, "epochs": 1, "eval_every": 1, **train},
            "image": {"out_size": 16}, "model": dict(SMALL_MODEL, patch_size=4, merge=2)}
    return apply_overrides(TrainConfig(), base)


def small_model(**kw) -> ModelConfig:
    return ModelConfig(image_size=16, **{**SMALL_MODEL, **kw})


def random_images(n, size=16, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size))


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
