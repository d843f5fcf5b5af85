import numpy as np
import pytest

from vqbench.rotation import RotationSpec


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    """Shared on-disk codebook cache so Lloyd tables build once per session."""
    return str(tmp_path_factory.mktemp("codebooks"))


def identity_rotation(dim: int) -> RotationSpec:
    return RotationSpec(dim=dim, seed=0, matrix=np.eye(dim))
