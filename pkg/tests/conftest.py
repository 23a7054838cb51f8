import numpy as np
import pytest
import torch
from hypothesis import settings

from progtok.tokenizer_model import StagePlan, build

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


TINY_WIDTHS = (8, 16, 32)


def tiny_plan(k=4, **kwargs) -> StagePlan:
    kwargs.setdefault("widths", TINY_WIDTHS)
    kwargs.setdefault("res_units", 1)
    return StagePlan(k=k, **kwargs)


@pytest.fixture(scope="session")
def tiny_model_4x():
    return build(tiny_plan(4), seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def torch_gen():
    return torch.Generator().manual_seed(1234)
