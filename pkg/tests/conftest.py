import numpy as np
import pytest

from fewbal.data import SyntheticSpec, generate_synthetic
from fewbal.nn import Encoder, EncoderConfig


@pytest.fixture(scope="session")
def small_dataset():
    """12/6/8 classes with 40 samples each, enough for 5-way 1..9-shot tasks."""
    return generate_synthetic(
        SyntheticSpec(classes_per_split=(12, 6, 8), samples_per_class=40,
                      feature_dim=8, seed=3)
    )


@pytest.fixture(scope="session")
def small_encoder():
    return Encoder(
        EncoderConfig(input_dim=8, hidden=(10,), embed_dim=6),
        np.random.default_rng(11),
    )
