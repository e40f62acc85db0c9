import numpy as np
import pytest

from survey_conformal.data import SurveyDataset
from survey_conformal.synthetic import GeneratorConfig, generate

# 12 race x education cells; a 30% calibration share gives cells of 32..355
THIN_CELL_POPULATION = {
    "White|College+": 664,
    "White|Some college": 818,
    "White|HS or less": 1184,
    "Hispanic|College+": 209,
    "Hispanic|Some college": 266,
    "Hispanic|HS or less": 232,
    "Black|College+": 151,
    "Black|Some college": 175,
    "Black|HS or less": 198,
    "Asian/Other|College+": 105,
    "Asian/Other|Some college": 144,
    "Asian/Other|HS or less": 445,
}

# group-varying intercept shifts, slopes and confidence distortions
HETEROGENEOUS = {
    "group_shift": {
        "White|College+": 0.3, "Hispanic|HS or less": -0.4, "Black|College+": 0.5,
        "Asian/Other|College+": -0.3, "Asian/Other|Some college": 0.2, "Black|Some college": -0.2,
    },
    "coefficient_scale": {
        "White|HS or less": 0.7, "Hispanic|College+": 1.3, "Black|College+": 1.4,
        "Asian/Other|College+": 0.6, "Asian/Other|HS or less": 1.2,
    },
    "miscalibration": {
        "White|College+": 1.1, "Hispanic|Some college": 1.4, "Black|College+": 1.6,
        "Asian/Other|College+": 1.8, "Asian/Other|Some college": 0.8, "Black|HS or less": 1.3,
    },
}


def small_config(**kw) -> GeneratorConfig:
    base = dict(cell_sizes={"A": 120, "B": 60, "C": 400, "D": 900}, master_seed=11)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def small_data():
    ds, probs, manifest = generate(small_config(miscalibration={"A": 1.5}, weight_law={"kind": "lognormal", "mu": 0.0, "sigma": 0.5}))
    return ds, probs, manifest


@pytest.fixture
def tiny_ds():
    return SurveyDataset(
        ids=("a", "b", "c"),
        outcomes=np.array([1, 3, 5]),
        groups=np.array([1, 1, 2]),
        weights=np.array([1.0, 1.0, 1.0]),
        n_classes=5,
        group_labels=("A", "B"),
    )


def tiny_experiment(**kw) -> dict:
    cfg = {
        "generator": {"cell_sizes": {"A": 60, "B": 40, "C": 200}, "master_seed": 5},
        "n_splits": 3,
        "models": ["prior", "oracle"],
    }
    cfg.update(kw)
    return cfg


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
