import numpy as np
import pytest
from hypothesis import settings

from camotex.fixtures import asset_path
from camotex.geometry import load_mesh, make_mesh
from camotex.pipeline import default_car, prepare_uv

settings.register_profile("camotex", max_examples=40, deadline=None)
settings.load_profile("camotex")


@pytest.fixture(scope="session")
def hemi_mesh():
    return load_mesh(asset_path("hemisphere.obj"))


@pytest.fixture(scope="session")
def car_mesh():
    """Packaged car after atlas relaxation, as produced by prepare-uv."""
    mesh, atlas = default_car()
    return prepare_uv(mesh, atlas, iterations=30).mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def triangle_mesh(p, q):
    """One textured triangle with 3D corners ``p`` and uv corners ``q``."""
    return make_mesh(np.asarray(p, float), np.array([[0, 1, 2]]), uv=np.asarray(q, float)[None],
                     textured=np.array([True]))


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
