import numpy as np
import pytest

from firecastnet import data, geomesh, model
from firecastnet import tensor as tn
from firecastnet.coupling import GridSpec


@pytest.fixture(scope="session")
def default_cube():
    return data.synth_cube(0)


@pytest.fixture(scope="session")
def small_cube():
    return data.synth_cube(3, range(2015, 2020), 16, 32)


@pytest.fixture(scope="session")
def level1_mesh():
    return geomesh.build_multimesh(1)


def toy_setup(dtype=np.float64, hidden=8, layers=2, seed=0):
    """Toy FireCastNet: [6, 14, 16, 32] input on a level-1 mesh."""
    with tn.precision(dtype):
        cfg = model.FireCastNetConfig(
            ts=6, embed_channels=hidden, mesh_hidden=hidden, processor_layers=layers, mesh_level=1
        )
        graphs = model.prepare_graphs(geomesh.build_multimesh(1), GridSpec.global_grid(16, 32), cfg)
        state = model.init_parameters(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.standard_normal((6, 14, 16, 32)).astype(dtype)
    return cfg, graphs, state, x


@pytest.fixture
def toy64():
    with tn.precision(np.float64):
        yield toy_setup(np.float64)
