import warnings

import pytest

from ecslab import dataset as ds
from ecslab import helmholtz as hz
from ecslab.core import builtin_registry_path, load_registry
from ecslab.ecs import Reference
from ecslab.helmholtz import ValidityWarning

warnings.simplefilter("ignore", ValidityWarning)

SHIPPED_FLUIDS = ["R1234ze(E)", "R1234yf", "propane", "R143a"]


@pytest.fixture(scope="session")
def registry():
    return load_registry(builtin_registry_path())


@pytest.fixture(scope="session")
def truth_models():
    return {fid: hz.HelmholtzModel(hz.load_builtin_eos(fid)) for fid in SHIPPED_FLUIDS}


@pytest.fixture(scope="session")
def reference(registry, truth_models):
    return Reference(model=truth_models["R1234ze(E)"], fluid=registry["R1234ze(E)"])


@pytest.fixture(scope="session")
def ref_grid(registry, truth_models):
    return ds.generate_grid(registry["R1234ze(E)"], truth_models["R1234ze(E)"])


@pytest.fixture(scope="session")
def corpus4(registry, truth_models, ref_grid):
    grids = [ref_grid]
    for fid in SHIPPED_FLUIDS[1:]:
        grids.append(ds.generate_grid(registry[fid], truth_models[fid]))
    return ds.Corpus(fluids=tuple(grids))
