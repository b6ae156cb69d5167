import numpy as np

from starmoe import checks, star
from starmoe.rng import SeededRng


def test_suite_registry_has_five_suites():
    assert list(checks.SUITES) == ["drift_bound", "smooth_estimator", "gradients", "gating", "acr_stop_gradient"]


def test_brute_topk_tie_rule():
    assert checks.brute_topk([1.0, 1.0, 0.0], 1) == {0}
    assert checks.brute_topk([0.0, 2.0, 2.0, 1.0], 2) == {1, 2}
    assert checks.brute_topk([0.5], 3) == {0}


def test_quick_suites_pass():
    assert checks.check_drift_bound(cases=50).passed
    assert checks.check_smooth_estimator(cases=10, draws=50_000, tol=0.02).passed
    assert checks.check_gradients(cases=3).passed
    assert checks.check_gating(cases=200).passed
    assert checks.check_acr_stop_gradient(cases=50).passed


def test_suite_line_carries_seed_on_failure():
    res = checks.SuiteResult("gating", False, 3, "mismatch", seed=2, seconds=0.1)
    assert res.line().startswith("FAIL gating") and "seed 2" in res.line()


def test_drift_suite_fails_when_kl_is_understated(monkeypatch):
    real = star.kl_from_logits
    monkeypatch.setattr(star, "kl_from_logits", lambda p, h: 0.01 * real(p, h))
    res = checks.check_drift_bound(cases=200)
    assert not res.passed and res.name.startswith("drift_bound (Pinsker)") and res.seed is not None


def test_gating_suite_catches_wrong_tie_rule(monkeypatch):
    from starmoe import moe

    def upper_tie(h, k):
        h = np.atleast_2d(h)
        order = np.argsort(-h[:, ::-1], axis=-1, kind="stable")[:, :k]
        mask = np.zeros(h.shape, dtype=bool)
        np.put_along_axis(mask, h.shape[-1] - 1 - order, True, axis=-1)
        return mask

    monkeypatch.setattr(moe, "topk_mask", upper_tie)
    assert not checks.check_gating(cases=300).passed


def test_kink_margin_is_finite_and_positive():
    problem = checks.random_small_problem(SeededRng(0).spawn(0))
    losses, params = checks.problem_losses(*problem)
    assert 0 <= checks.kink_margin(losses, params, problem[0], problem[1]) < np.inf
