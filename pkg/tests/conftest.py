from pathlib import Path

import numpy as np
import pytest

import stumblekit
from stumblekit.model import ModelParams, Stance, default_params

GAITS_JSON = Path(stumblekit.__file__).resolve().parent / "data" / "gaits.json"


@pytest.fixture(scope="session")
def params() -> ModelParams:
    return default_params()


@pytest.fixture(scope="session")
def gait_library(params):
    """Installed gait library; synthesized and cached on first use."""
    from stumblekit.gaits import GaitLibrary, build_library

    if GAITS_JSON.exists():
        return GaitLibrary.load(GAITS_JSON)
    lib = build_library(params)
    GAITS_JSON.parent.mkdir(parents=True, exist_ok=True)
    lib.save(GAITS_JSON)
    return lib


@pytest.fixture(scope="session")
def gait(gait_library):
    return gait_library.nearest(0.50)


@pytest.fixture(params=[Stance.PROSTHETIC, Stance.CONTRALATERAL], ids=["pros-stance", "contra-stance"])
def stance(request) -> Stance:
    return request.param


def random_state_vectors(rng: np.random.Generator, n: int):
    """Random joint configurations in a physically sensible range."""
    q = np.empty((n, 5))
    q[:, 0] = rng.uniform(-0.4, 0.4, n)    # torso
    q[:, 1] = rng.uniform(-0.6, 0.6, n)    # stance hip
    q[:, 2] = rng.uniform(-0.6, 0.6, n)    # swing hip
    q[:, 3] = rng.uniform(-1.5, 0.0, n)    # swing knee
    q[:, 4] = rng.uniform(-1.2, 0.0, n)    # stance knee
    qd = rng.normal(0.0, 2.0, (n, 5))
    return q, qd
