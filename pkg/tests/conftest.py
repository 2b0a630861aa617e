import numpy as np
import pytest

from scl.catalog import default_catalog
from scl.geometry import ObjectClass, box_points, convex_mesh


def make_box_class(dx, dy, dz, cid=0, name="box"):
    verts, faces = convex_mesh(box_points(dx, dy, dz))
    return ObjectClass(cid, name, verts, faces, [[1, 0, 0, 0]], [],
                       symmetries=[[1, 0, 0, 0]])


@pytest.fixture(scope="session")
def catalog():
    return default_catalog()


@pytest.fixture(scope="session")
def unit_cube():
    return make_box_class(1.0, 1.0, 1.0, name="unit_cube")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
