import numpy as np
import pytest

from evidx import synth
from evidx.classifier import init_classifier, train_classifier


@pytest.fixture(scope="session")
def small_corpus():
    return synth.generate_corpus(60, 32, 11)


@pytest.fixture(scope="session")
def small_model(small_corpus):
    # 32x32 inputs, two blocks; fast enough for unit tests
    return train_classifier(small_corpus, epochs=3, seed=3, channels=(8, 16)).model


@pytest.fixture
def random_model():
    return init_classifier(5, channels=(4, 8), image_size=32).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def model64():
    # default architecture at 64x64, briefly trained
    train, _ = synth.split_corpus(synth.generate_corpus(100, 64, 42))
    return train_classifier(train, epochs=4, seed=42).model


@pytest.fixture(scope="session")
def images64():
    return [item for item in synth.generate_corpus(7, 64, 777) if item.label > 0]
