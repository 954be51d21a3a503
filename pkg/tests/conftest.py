import numpy as np
import pytest

from msmcalib.dataset import from_frame
from msmcalib.simulate import ScenarioConfig, generate_cohort


def make_long_csv(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text.strip() + "\n")
    return path


def random_cohort(seed, n=40, T=3, censor=True, kind="ordinal3"):
    """Small cohort with arbitrary covariates and (optional) monotone dropout."""
    rng = np.random.default_rng(seed)
    shape = (n, T + 1)
    r = np.ones(shape)
    if censor:
        for j in range(1, T + 1):
            r[:, j] = r[:, j - 1] * (rng.random(n) < 0.8)
    a0 = (rng.random(shape) < 0.5).astype(float)
    a1 = a0 * (rng.random(shape) < 0.5)
    cols = {
        "r": r,
        "y": rng.normal(size=shape),
        "x1": rng.normal(size=shape),
        "x2": rng.uniform(-1, 2, size=shape),
    }
    if kind == "continuous":
        cols["a"] = rng.normal(size=shape)
    else:
        cols["a0"] = a0
        if kind == "ordinal3":
            cols["a1"] = a1
    return from_frame([f"p{i}" for i in range(n)], kind, cols)


@pytest.fixture(scope="session")
def scenario1_data():
    return generate_cohort(ScenarioConfig.scenario(1, n=500, seed=11))


@pytest.fixture(scope="session")
def scenario2_data():
    return generate_cohort(ScenarioConfig.scenario(2, n=500, seed=12))
