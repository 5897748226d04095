import numpy as np
import pytest

from pano4d.geometry import icosahedron_rig
from pano4d.oracle import OracleScene, render_video


@pytest.fixture(scope="session")
def oracle_scene():
    return OracleScene(height=64, frames=5, seed=3)


@pytest.fixture(scope="session")
def oracle_data(oracle_scene):
    """(video, depths, flows) of the shared small test scene."""
    return render_video(oracle_scene)


@pytest.fixture(scope="session")
def small_rig():
    return icosahedron_rig(width=32, height=32)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
