import numpy as np
import pytest

from fungen.config import DenoiserConfig, SyntheticSpec
from fungen.data import make_synthetic
from fungen.denoiser import init_params
from fungen.diffusion import make_schedule
from fungen.seqcore import encode_sequence


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return DenoiserConfig(n_blocks=2, d_model=16, n_heads=2, d_ff=32, max_len=64, n_go=4, n_ipr=2, n_ec=2)


@pytest.fixture
def tiny_model(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture
def schedule():
    return make_schedule(20)


@pytest.fixture
def small_spec():
    return SyntheticSpec(n_classes=4, signature_length=8, background_min=24, background_max=32, n_records=40, seed=3)


@pytest.fixture
def small_corpus(small_spec):
    return make_synthetic(small_spec)


def random_text(rng, length):
    return "".join(rng.choice(list("ACDEFGHIKLMNPQRSTVWY"), size=length))


def random_sequence(rng, length):
    return encode_sequence(random_text(rng, length))
