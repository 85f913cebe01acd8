import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small MD dataset shared by IO/training smoke tests (64-point clouds)."""
    from artiflow.synthgen import DatasetSpec, generate_dataset

    out = tmp_path_factory.mktemp("tiny_ds")
    spec = DatasetSpec(out_dir=out, mix="MD", doors=1, drawers=1,
                       samples_per_object=6, n_points=64, seed=42)
    generate_dataset(spec)
    return out


@pytest.fixture(scope="session")
def tiny_ha_dataset(tmp_path_factory):
    """Small HA dataset (with histories) for conditioning-path tests."""
    from artiflow.synthgen import DatasetSpec, generate_dataset

    out = tmp_path_factory.mktemp("tiny_ha")
    spec = DatasetSpec(out_dir=out, mix="HA", doors=1, drawers=1,
                       samples_per_object=6, n_points=64, seed=7)
    generate_dataset(spec)
    return out
