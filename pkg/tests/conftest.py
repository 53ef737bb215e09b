"""Shared fixtures. The trained bundles are session-scoped because toy
training runs take ~20s each and several test modules reuse them."""

from __future__ import annotations

import pytest
import torch

from adapts.backbone import TOY_SPEC, make_toy_backbone
from adapts.data import make_toy_dataset
from adapts.pipeline import TrainConfig, run_multiclass, run_single

TOY_SEED = 0


@pytest.fixture(scope="session")
def toy_layout(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_data")
    return make_toy_dataset(root, n_categories=3, n_train=40, n_test=10, seed=TOY_SEED)


@pytest.fixture(scope="session")
def toy_cfg():
    return TrainConfig(seed=TOY_SEED)


@pytest.fixture(scope="session")
def single_run(toy_layout, toy_cfg):
    """(bundle, report) of a single-scenario run over the toy dataset."""
    return run_single(toy_layout, toy_cfg)


@pytest.fixture(scope="session")
def multiclass_run(toy_layout, toy_cfg):
    """(bundle, report) of a multi-class (routed) run over the toy dataset."""
    return run_multiclass(toy_layout, toy_cfg)


@pytest.fixture()
def toy_backbone():
    return make_toy_backbone(7)


@pytest.fixture()
def rand_images():
    gen = torch.Generator().manual_seed(11)
    return torch.rand(2, 3, *TOY_SPEC.input_size, generator=gen)
