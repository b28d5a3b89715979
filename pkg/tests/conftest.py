import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from d2aunet.config import TrainConfig
from d2aunet.model import EncoderSpec, ModelConfig

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# acceptance results, printed once at the end of the session
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(encoder=EncoderSpec("vgg", (2, 3)), reduce_ratio=2, input_size=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    """Three-stage 16x16 model, small enough for multi-epoch tests."""
    from d2aunet.data import AugmentConfig

    base = dict(
        model=ModelConfig(encoder=EncoderSpec("vgg", (4, 8, 8)), reduce_ratio=2, input_size=16),
        augment=AugmentConfig(resize_to=20, crop_to=16),
        lr=1e-3,
        batch_size=4,
        epochs=5,
    )
    base.update(kw)
    return TrainConfig(**base)
