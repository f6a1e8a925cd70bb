"""Shared fixtures: canonical parameter set and cached experiment runs."""

import pytest

from clonesim import ModelParams, run_experiment1, run_experiment2, run_experiment3


@pytest.fixture(scope="session")
def table_params():
    return ModelParams()


@pytest.fixture(scope="session")
def exp1_results(table_params):
    """All four precursor arms at default parameters and solver settings."""
    return run_experiment1(table_params)


@pytest.fixture(scope="session")
def exp2_results(table_params):
    return run_experiment2(table_params)


@pytest.fixture(scope="session")
def exp3_results(table_params):
    return run_experiment3(table_params)
