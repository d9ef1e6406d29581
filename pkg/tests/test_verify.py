import json

import numpy as np
import pytest

from tuckersearch.objective import grad_loss, grad_reg
from tuckersearch.tensor_core import FactorPoint, random_point
from tuckersearch.verify import (ANTI_CONCENTRATION_FLOOR, CHECKS,
                                 LemmaReport, SUBLEVEL_NORM_CONSTANT,
                                 check_anti_concentration,
                                 check_core_lower_bound, check_euler,
                                 check_orthogonality, check_sublevel_bound,
                                 check_submultiplicativity, check_wedin,
                                 gallery_one_missing, gallery_origin,
                                 gallery_three_missing, gallery_two_missing,
                                 gallery_unregularized_counterexample,
                                 run_suite, saddle_gallery, suite_to_json)


# ---------------------------------------------------------------------------
# report plumbing


def test_report_pass_flag_must_mirror_failures():
    with pytest.raises(ValueError, match="mirror"):
        LemmaReport(lemma="x", trials=3, failures=1, worst_margin=0.1,
                    tolerance=0.0, passed=True)


def test_report_json_dict_has_stable_keys():
    rep = check_euler(trials=5, rng=np.random.default_rng(0))
    doc = rep.to_json_dict()
    assert set(doc) == {"lemma", "trials", "failures", "worst_margin",
                       "tolerance", "passed", "details"}
    json.dumps(doc)


# ---------------------------------------------------------------------------
# identity checks


def test_orthogonality_clean_gradients_pass():
    rep = check_orthogonality(trials=60, rng=np.random.default_rng(1))
    assert rep.passed and rep.failures == 0
    assert rep.worst_margin <= 0.0


def test_orthogonality_negative_control_catches_corruption():
    def bad_grad_reg(p):
        g = grad_reg(p)
        return g + 0.05 * grad_loss_cache[0]

    grad_loss_cache = [None]

    def spying_grad_loss(p, T):
        g = grad_loss(p, T)
        grad_loss_cache[0] = g
        return g

    rep = check_orthogonality(trials=40, rng=np.random.default_rng(2),
                              grad_loss_fn=spying_grad_loss,
                              grad_reg_fn=bad_grad_reg)
    assert not rep.passed
    assert rep.failures > 0
    assert rep.worst_margin > 0.0


def test_euler_identity_holds():
    rep = check_euler(trials=80, rng=np.random.default_rng(3))
    assert rep.passed
    assert rep.worst_margin <= 0.0


# ---------------------------------------------------------------------------
# inequality checks


def test_sublevel_norms_stay_under_frozen_constant():
    rep = check_sublevel_bound(trials=20, rng=np.random.default_rng(4))
    assert rep.passed
    assert rep.details["fitted_constant"] <= SUBLEVEL_NORM_CONSTANT
    assert rep.details["exponent"] <= 0.25
    # boundary points at higher levels really are bigger
    ex = rep.details["extremes"]
    assert ex["100.0"] > ex["1.0"]


def test_core_lower_bound_holds():
    rep = check_core_lower_bound(trials=80, rng=np.random.default_rng(5))
    assert rep.passed


def test_submultiplicativity_holds_and_rank_one_is_tight():
    rep = check_submultiplicativity(trials=80, rng=np.random.default_rng(6))
    assert rep.passed
    assert abs(rep.details["tight_case_gap"]) <= 1e-10


def test_wedin_bound_has_zero_violations():
    rep = check_wedin(trials=100, rng=np.random.default_rng(7))
    assert rep.failures == 0


def test_anti_concentration_floor_and_oracle():
    rep = check_anti_concentration(trials=2, rng=np.random.default_rng(8),
                                   samples=4000)
    assert rep.passed
    assert rep.details["worst_probability"] >= ANTI_CONCENTRATION_FLOOR
    assert rep.details["rank_one_oracle_gap"] <= 0.03


# ---------------------------------------------------------------------------
# saddle gallery


def test_origin_gallery_point_is_flat_but_escapable():
    rep = gallery_origin(np.random.default_rng(9), attempts=60)
    assert rep.passed
    assert rep.details["grad_norm"] <= 1e-10
    assert rep.details["curvature"] <= 1e-8
    assert rep.details["improved_fraction"] >= 0.3
    assert rep.details["regularizer_drift"] <= 1e-20


def test_unregularized_counterexample_report():
    rep = gallery_unregularized_counterexample(np.random.default_rng(10),
                                               directions=300)
    assert rep.passed
    assert rep.details["loss_grad_norm"] <= 1e-10
    assert rep.details["regularizer_value"] == 9.0
    assert (rep.details["full_grad_norm"]
            >= rep.details["gradient_lower_bound"] > 0.0)


@pytest.mark.parametrize("factory,expected", [
    (gallery_one_missing, 2.0),
    (gallery_two_missing, 3.0),
    (gallery_three_missing, 4.0),
])
def test_gallery_slopes_classify_saddle_order(factory, expected):
    rep = factory()
    assert rep.passed
    assert abs(rep.details["slope"] - expected) <= 0.5


def test_gallery_points_are_exact_critical_points():
    for rep in (gallery_one_missing(), gallery_two_missing()):
        assert rep.details["grad_norm"] <= 1e-12
        assert rep.details["regularizer"] <= 1e-20


def test_saddle_gallery_returns_all_five():
    reports = saddle_gallery(np.random.default_rng(11))
    assert [r.lemma for r in reports] == [
        "origin-flat-saddle", "unregularized-counterexample",
        "one-missing-direction", "two-missing-direction",
        "three-missing-direction"]
    assert all(r.passed for r in reports)


# ---------------------------------------------------------------------------
# the suite


def test_suite_runs_every_registered_check():
    reports = run_suite(seed=0)
    assert len(reports) == len(CHECKS) - 1 + 5
    assert all(r.passed for r in reports)


def test_suite_is_deterministic_given_seed():
    a = suite_to_json(run_suite(seed=3))
    b = suite_to_json(run_suite(seed=3))
    assert a == b
    c = suite_to_json(run_suite(seed=4))
    assert a != c


def test_suite_selector_runs_named_check_on_matching_stream():
    one = run_suite(seed=5, names=["euler"])
    assert len(one) == 1
    full = [r for r in run_suite(seed=5) if r.lemma == one[0].lemma]
    assert full[0].worst_margin == one[0].worst_margin


def test_suite_rejects_unknown_selector_and_reports_choices():
    with pytest.raises(ValueError, match="unknown checks"):
        run_suite(names=["euler", "bogus"])


def test_suite_json_reports_aggregate_flag():
    doc = json.loads(suite_to_json(run_suite(seed=0, names=["wedin"])))
    assert doc["all_passed"] is True
    assert doc["reports"][0]["lemma"] == "projector-perturbation-bound"
