import numpy as np
import pytest

from ranktrack import pipeline


def quick_config(**overrides) -> pipeline.TrainConfig:
    """Small-but-real training config used across the suite."""
    base = dict(
        seed=7,
        template_size=64,
        search_size=128,
        iterations=500,
        train_sequences=6,
        frames_per_sequence=6,
        batch_size=4,
        lr=0.005,
        similarity=0.9,
        distractors=2,
        eval_sequences=4,
        eval_frames=6,
    )
    base.update(overrides)
    cfg = pipeline.TrainConfig(**base)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def trained_baseline():
    """One shared baseline model; training it per-test would dominate runtime."""
    cfg = quick_config()
    result = pipeline.train(cfg)
    return cfg, result


@pytest.fixture(scope="session")
def rng_points():
    return np.random.default_rng(20240)
