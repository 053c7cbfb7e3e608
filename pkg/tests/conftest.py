"""Shared fixtures: the bundled desk network, its dataset and fitted pipeline.

Heavy artifacts are session-scoped so the analytic chain is computed once.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from stabsched.network import GridModel, load_grid
from stabsched.pipeline import CoefficientMap
from stabsched.regression import Dataset, SmoothRegressionConfig, generate_dataset
from stabsched.scheduler import UcInstance, load_instance
from stabsched.sensitivity import UncertainParameterSpec, analytic_moments

DATA = resources.files("stabsched") / "data"

G_LIM = 2.5
NU = 1.0
WIND_CAP_PU = 1.6


def data_path(name: str) -> Path:
    return Path(str(DATA / name))


@pytest.fixture(scope="session")
def desk_grid() -> GridModel:
    return load_grid(data_path("desk_network.json"))


@pytest.fixture(scope="session")
def desk_dataset(desk_grid) -> Dataset:
    return generate_dataset(desk_grid, n_wind=8, wind_range=(0.0, WIND_CAP_PU))


@pytest.fixture(scope="session")
def smooth_cfg() -> SmoothRegressionConfig:
    return SmoothRegressionConfig(g_lim=G_LIM, nu=NU)


@pytest.fixture(scope="session")
def desk_map(desk_grid, desk_dataset, smooth_cfg) -> CoefficientMap:
    return CoefficientMap.from_dataset(desk_grid, desk_dataset, smooth_cfg)


@pytest.fixture(scope="session")
def desk_fit(desk_map):
    return desk_map.fit()


@pytest.fixture(scope="session")
def spec_cv5(desk_grid) -> UncertainParameterSpec:
    return UncertainParameterSpec.from_cv(desk_grid, 0.05)


@pytest.fixture(scope="session")
def analytic_cv5(desk_map, spec_cv5):
    return analytic_moments(desk_map, spec_cv5)


@pytest.fixture(scope="session")
def desk_instance() -> UcInstance:
    return load_instance(data_path("desk_instance.json"))


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
