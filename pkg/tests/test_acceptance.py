"""Acceptance suite: one test per release criterion, at its stated tolerance.

Each test prints a single PASS/FAIL line (visible with `pytest -s`); the
Monte Carlo recovery check is the only multi-minute item.  Division-profile
comparisons consider entries of at least 0.5 percent, the resolution at
which peaks are experimentally distinguishable.
"""

import math
from contextlib import contextmanager

import numpy as np
import pytest

from clonesim import (DelaySet, FitProblem, ModelParams, StepControl,
                      cohort_activated_totals, confidence_intervals, division_profile,
                      fit, fold_difference, integrate, profile_support,
                      recruitment_fraction, recruitment_regression, run,
                      run_experiment1, run_experiment2, run_experiment3,
                      synthesize_data)
from clonesim.fitting import FREE_PARAMS
from clonesim.kernel import AntigenSupplySpec
from clonesim.scenarios import (DAY, DEFAULT_STEP_DIVISOR, CohortSpec, ScenarioSpec,
                                build_experiment2)

PROFILE_FLOOR = 0.5


@contextmanager
def criterion(number, description):
    try:
        yield
    except Exception:
        print(f"[acceptance {number:02d}] FAIL - {description}")
        raise
    print(f"[acceptance {number:02d}] PASS - {description}")


def acceptance_observables(exp1, exp2, exp3):
    """Every quantity the criteria below assert on, as one flat dict."""
    obs = {}
    obs["fold_day0"] = fold_difference(exp1, 0.0)
    obs["fold_day7"] = fold_difference(exp1, 7 * DAY)
    rec1 = {n0: recruitment_fraction(res) for n0, res in exp1.items()}
    line = recruitment_regression(rec1)
    obs["slope"] = line.slope
    obs["r_squared"] = line.r_squared
    for tag, results in (("exp2", exp2), ("exp3", exp3)):
        for group, res in results.items():
            obs[f"{tag}_recruit_{group}"] = recruitment_fraction(res)
            profile = division_profile(res, res.spec.horizon)
            for i, share in enumerate(profile, start=1):
                if share >= PROFILE_FLOOR:
                    obs[f"{tag}_profile_{group}_{i}"] = share
    return obs


class TestAcceptance:
    def test_01_fold_differences(self, exp1_results):
        with criterion(1, "fold difference: day 0 exactly 947, day 7 in [9, 10]"):
            fold0 = fold_difference(exp1_results, 0.0)
            assert fold0 == pytest.approx(94.7 / 0.1, rel=1e-12)
            assert fold0 == pytest.approx(947.0, rel=1e-12)
            fold7 = fold_difference(exp1_results, 7 * DAY)
            assert 9.0 <= fold7 <= 10.0, f"day-7 fold {fold7}"

    def test_02_recruitment_regression(self, exp1_results):
        with criterion(2, "recruitment slope -6 +/- 1.5 per log10 dose, R^2 >= 0.9"):
            rec = {n0: recruitment_fraction(res) for n0, res in exp1_results.items()}
            line = recruitment_regression(rec)
            assert line.slope == pytest.approx(-6.0, abs=1.5), line
            assert line.r_squared >= 0.9, line

    def test_03_experiment2_recruitment(self, exp2_results):
        with criterion(3, "competition recruitment 76/74/58 +/- 5, ordered"):
            rec = {g: recruitment_fraction(res) for g, res in exp2_results.items()}
            assert rec["i"] == pytest.approx(76.0, abs=5.0), rec
            assert rec["ii"] == pytest.approx(74.0, abs=5.0), rec
            assert rec["iii"] == pytest.approx(58.0, abs=5.0), rec
            assert rec["i"] >= rec["ii"] > rec["iii"], rec

    def test_04_experiment3_recruitment(self, exp3_results):
        with criterion(4, "late-arrival recruitment 62/46 +/- 5 and < 1 percent"):
            rec = {g: recruitment_fraction(res) for g, res in exp3_results.items()}
            assert rec["i"] == pytest.approx(62.0, abs=5.0), rec
            assert rec["ii"] == pytest.approx(46.0, abs=5.0), rec
            assert rec["iii"] < 1.0, rec

    def test_05_division_profiles(self, exp2_results, exp3_results):
        with criterion(5, "profiles: normalised, deep support, mode shifts left"):
            for results in (exp2_results, exp3_results):
                for res in results.values():
                    profile = division_profile(res, res.spec.horizon)
                    assert (profile >= 0).all()
                    assert profile.sum() == pytest.approx(100.0, abs=1e-6)
            support = profile_support(division_profile(exp2_results["i"], 84.0),
                                      threshold=1.0)
            assert support >= 6, f"support {support}"
            for results, horizon in ((exp2_results, 84.0), (exp3_results, 132.0)):
                mode_i = np.argmax(division_profile(results["i"], horizon))
                mode_iii = np.argmax(division_profile(results["iii"], horizon))
                assert mode_iii < mode_i, (mode_i, mode_iii)

    def test_06_equal_cohort_symmetry(self, exp2_results):
        with criterion(6, "simultaneous equal cohorts trace each other to 1e-8"):
            res = exp2_results["ii"]
            times = sorted(set(res.spec.observation_times) | set(np.linspace(0, 84, 29)))
            for t in times:
                a, b = cohort_activated_totals(res, t)
                if max(a, b) > 0:
                    assert abs(a - b) / max(a, b) < 1e-8, (t, a, b)

    def test_07_solver_validation(self, table_params, exp1_results, exp2_results,
                                  exp3_results):
        with criterion(7, "analytic delay test to 1e-6; half-step shifts < 1e-4"):
            traj = integrate(lambda t, y, lagged: -lagged[0],
                             lambda t: np.array([1.0]), DelaySet((1.0,)),
                             (0.0, 2.0), StepControl(max_step=0.05))
            assert traj.evaluate(1.0)[0] == pytest.approx(0.0, abs=1e-6)
            assert traj.evaluate(2.0)[0] == pytest.approx(-0.5, abs=1e-6)

            coarse = acceptance_observables(exp1_results, exp2_results, exp3_results)
            half = min(table_params.sigma, table_params.tau) / (2 * DEFAULT_STEP_DIVISOR)
            fine = acceptance_observables(
                run_experiment1(table_params, max_step=half),
                run_experiment2(table_params, max_step=half),
                run_experiment3(table_params, max_step=half))
            for key, value in coarse.items():
                rel = abs(value - fine[key]) / abs(fine[key])
                assert rel < 1e-4, (key, value, fine[key], rel)

    def test_08_conservation_ablation(self, table_params):
        with criterion(8, "no death, no grazing, fixed antigen: totals never shrink"):
            params = table_params.with_values(d=0.0, d_A=0.0, s=0.0, s_N=0.0)
            spec = ScenarioSpec(cohorts=(CohortSpec("seeded", n0=5.0),),
                                antigen=AntigenSupplySpec(dose=0.0, t_k=0.0),
                                horizon=240.0, observation_times=(240.0,),
                                params=params, initial_antigen=1.0)
            result = run(spec)
            grid = np.arange(0.0, 240.0 + 0.25, 0.5)
            totals = np.array([result.total(t) for t in grid])
            assert np.diff(totals).min() >= -1e-9 * totals.max()

    def test_09_fit_oracle(self):
        with criterion(9, "noise-free recovery within 1 percent; 95pc intervals "
                          "cover truth in >= 90 percent of replicate checks"):
            truth = ModelParams()
            clean = synthesize_data(truth, noise=0.0, seed=0)
            perturb = {"r_e": 1.2, "r_N": 0.8, "g": 0.8, "d": 1.2, "tau": 1.2, "s": 0.8}
            initial = {k: getattr(truth, k) * f for k, f in perturb.items()}
            result = fit(FitProblem(data=clean, initial=initial))
            assert result.success, result.message
            for name in FREE_PARAMS:
                rel = abs(result.estimates[name] - getattr(truth, name)) / getattr(truth, name)
                assert rel < 0.01, (name, result.estimates[name], rel)

            replicates = 50
            covered = checked = 0
            for seed in range(replicates):
                noisy = synthesize_data(truth, noise=0.05, seed=seed)
                res = fit(FitProblem(data=noisy))
                assert res.success, (seed, res.message)
                intervals = confidence_intervals(res, level=0.95)
                for name, (lo, hi) in intervals.items():
                    checked += 1
                    covered += lo <= getattr(truth, name) <= hi
            assert checked == replicates * len(FREE_PARAMS)
            coverage = covered / checked
            assert coverage >= 0.90, f"coverage {coverage:.3f} ({covered}/{checked})"

    def test_10_feedback_ablation(self, table_params):
        with criterion(10, "without antigen downregulation the group spread collapses"):
            params = table_params.with_values(s=0.0)
            rec = {g: recruitment_fraction(run(build_experiment2(g, params)))
                   for g in ("i", "ii", "iii")}
            spread = max(rec.values()) - min(rec.values())
            assert spread < 2.0, rec
