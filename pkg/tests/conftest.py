import sys

import numpy as np
import pytest

from toc3d.encoder import EncoderConfig, EncoderWeights
from toc3d.mqts import ScorerParams, TokenGrid
from toc3d.scene import CameraRig, build_dataset, lattice_provenance


@pytest.fixture(scope="session")
def rig():
    return CameraRig.surround()


@pytest.fixture(scope="session")
def records(rig):
    return build_dataset(7, 4, rig)


@pytest.fixture(scope="session")
def tiny_enc():
    return EncoderConfig(layers=4, dim=16, heads=2, mlp_ratio=2.0, window_size=2, global_attn_layers=(1, 3))


@pytest.fixture(scope="session")
def tiny_weights(tiny_enc):
    return EncoderWeights.init(tiny_enc, 3)


@pytest.fixture(scope="session")
def tiny_scorer(tiny_enc):
    return ScorerParams.init(5, tiny_enc.dim, query_dim=8, n_queries=6)


def random_grid(rng, views, rows, cols, dim):
    prov = lattice_provenance(views, rows, cols)
    return TokenGrid(rng.normal(size=(len(prov), dim)), prov)


@pytest.fixture
def grid_factory():
    return random_grid


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
