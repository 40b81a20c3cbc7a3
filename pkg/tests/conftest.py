import csv
from importlib import resources

import pytest

from auxchart.process import ProcessParameters


@pytest.fixture
def params():
    """mu = 5, sigma = 1 (C = 0.2) with strong correlation."""
    return ProcessParameters(mu_y=5.0, mu_x=5.0, sigma_y=1.0, sigma_x=1.0, rho_xy=0.9)


@pytest.fixture
def independent_params():
    return ProcessParameters(mu_y=5.0, mu_x=5.0, sigma_y=1.0, sigma_x=1.0, rho_xy=0.0)


def load_table(name):
    text = resources.files("auxchart").joinpath("data", f"{name}.csv").read_text(encoding="utf-8")
    return list(csv.DictReader(text.splitlines()))


@pytest.fixture(scope="session")
def table1():
    return load_table("table1")


@pytest.fixture(scope="session")
def table2():
    return load_table("table2")
