"""Simulation and parameter estimation for antigen-regulated T cell expansion."""

from .kernel import (AntigenSupplySpec, CohortState, ModelParams, NaiveSupplySpec,
                     StateLayout, SupplySet, SystemState, antigen_supply_rate,
                     naive_supply_rate, proliferation_rate, rhs, total_t_cells)
from .dde import DelaySet, DenseTrajectory, IntegrationError, StepControl, integrate
from .scenarios import (EXPERIMENT1_DOSES, GROUPS, CohortSpec, RegressionLine,
                        ScenarioSpec, SimulationResult, build_experiment1,
                        build_experiment2, build_experiment3, cohort_activated_totals,
                        division_profile, fold_difference, profile_from_state,
                        profile_support, recruitment_fraction, recruitment_regression,
                        run, run_experiment1, run_experiment2, run_experiment3)
from .fitting import (DataRecord, DataSet, FitControl, FitProblem, FitResult,
                  confidence_intervals, fit, load_dataset, residuals, save_dataset,
                  synthesize_data)

__version__ = "0.1.0"

__all__ = [
    "AntigenSupplySpec", "CohortSpec", "CohortState", "DataRecord", "DataSet",
    "DelaySet", "DenseTrajectory", "EXPERIMENT1_DOSES", "FitControl", "FitProblem",
    "FitResult", "GROUPS", "IntegrationError", "ModelParams", "NaiveSupplySpec",
    "RegressionLine", "ScenarioSpec", "SimulationResult", "StateLayout", "StepControl",
    "SupplySet", "SystemState", "antigen_supply_rate", "build_experiment1",
    "build_experiment2", "build_experiment3", "cohort_activated_totals",
    "confidence_intervals", "division_profile", "fit", "fold_difference", "integrate",
    "load_dataset", "naive_supply_rate", "profile_from_state", "profile_support",
    "proliferation_rate", "recruitment_fraction", "recruitment_regression", "residuals",
    "rhs", "run", "run_experiment1", "run_experiment2", "run_experiment3",
    "save_dataset", "synthesize_data", "total_t_cells",
]
