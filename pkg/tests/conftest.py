import math

import numpy as np
import pytest

from cbilab.mechanisms import CbiParams, FiniteAtoms, PowerLawDensity, TemperedPowerLaw, ZeroMeasure
from cbilab.sde import CbiModel, SimConfig


@pytest.fixture
def cir():
    """β=1, b=1, σ²=2 with no jumps; the invariant law is Gamma(1, 1)."""
    return CbiParams.from_sigma2(1.0, 1.0, 2.0)


@pytest.fixture
def cir_model(cir):
    return CbiModel(cir)


@pytest.fixture
def small_sim():
    return SimConfig(dt=1e-2, horizon=1.0, n_paths=512, master_seed=11, record_grid=(0.5, 1.0))


# parameter sets used by the consistency properties
CORPUS = [
    CbiParams.from_sigma2(1.0, 1.0, 2.0),
    CbiParams.from_sigma2(0.5, 2.0, 0.5, nu=FiniteAtoms([(1.0, 1.0), (3.0, 0.5)])),
    CbiParams(1.0, 1.0, 0.0, PowerLawDensity(1.0, -2.5), FiniteAtoms([(math.e, 1.0)])),
    CbiParams(0.0, 0.5, 1.0, TemperedPowerLaw(1.0, -2.2, 1.0), ZeroMeasure()),
    CbiParams(0.0, 1.0, 0.0, ZeroMeasure(), PowerLawDensity(1.0, -1.5)),
    CbiParams(0.2, 1.0, 0.3, FiniteAtoms([(2.0, 1.0)]), TemperedPowerLaw(0.5, -1.5, 2.0)),
]


@pytest.fixture(params=range(len(CORPUS)), ids=lambda i: f"corpus{i}")
def corpus_params(request):
    return CORPUS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance results, filled by tests/test_acceptance.py and printed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
