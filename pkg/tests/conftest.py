import os
from pathlib import Path

import pytest

from promptmim import data, encoders, training

# Pretraining the shared encoder takes ~2 minutes; setting this variable to a
# writable path caches the checkpoint across local pytest invocations.
CACHE_ENV = "PROMPTMIM_TEST_ENCODER_CACHE"


@pytest.fixture(scope="session")
def suite_specs():
    return data.default_suite()


@pytest.fixture(scope="session")
def suite_datasets(suite_specs):
    return [data.generate_dataset(s) for s in suite_specs]


@pytest.fixture(scope="session")
def default_encoder(suite_specs):
    """The frozen dual encoder every protocol test shares."""
    cache = os.environ.get(CACHE_ENV)
    if cache and Path(cache).exists():
        return encoders.DualEncoder.load(cache)
    encoder = training.pretrain(
        encoders.EncoderConfig(), suite_specs,
        steps=training.PRETRAIN_STEPS, seed=0,
    )
    if cache:
        encoder.save(cache)
    return encoder


@pytest.fixture(scope="session")
def short_encoder(suite_specs):
    """A 500-step encoder for pretraining-trajectory assertions."""
    cache = os.environ.get(CACHE_ENV)
    if cache:
        short = Path(cache).with_suffix(".short.json")
        if short.exists():
            return encoders.DualEncoder.load(short)
    encoder = training.pretrain(encoders.EncoderConfig(), suite_specs,
                                steps=500, seed=0)
    if cache:
        encoder.save(Path(cache).with_suffix(".short.json"))
    return encoder


@pytest.fixture(scope="session")
def family0(suite_datasets):
    return suite_datasets[0]


@pytest.fixture(scope="session")
def family0_split(family0):
    return data.make_split(family0, 16, 0)
