import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonbench.ntk import (DegenerateScenario, Geometry, KernelScenario, closed_form_score, kernel_confidence,
                             verify_theorem)


def direct_confidence(clean_x, clean_y, poison_x, test_x, target, gamma):
    """Plain loops over the kernel sums, kept apart from the vectorized code."""
    out = []
    for t in test_x:
        def k(a):
            return math.exp(-2 * gamma * sum((ai - ti) ** 2 for ai, ti in zip(a, t)))
        num = sum(k(x) for x, y in zip(clean_x, clean_y) if y == target) + sum(k(x) for x in poison_x)
        den = sum(k(x) for x in clean_x) + sum(k(x) for x in poison_x)
        out.append(num / den)
    return out


def direct_score(poison_x, sources, test_x):
    out = []
    for t in test_x:
        total = 0.0
        for xp, xs in zip(poison_x, sources):
            total += 1.0 / sum((a - b) * (a - c) for a, b, c in zip(xp, xs, t))
        out.append(total)
    return out


def test_single_target_point_is_one():
    s = KernelScenario([[0.3]], [1], np.zeros((0, 1)), np.zeros((0, 1)), [[0.3]], target=1)
    assert kernel_confidence(s)[0] == 1.0


def test_symmetric_pair_is_half():
    s = KernelScenario([[-1.0], [1.0]], [1, 0], np.zeros((0, 1)), np.zeros((0, 1)), [[0.0]], target=1)
    assert kernel_confidence(s)[0] == pytest.approx(0.5, abs=1e-15)


def test_matches_direct_sum_1d():
    rng = np.random.default_rng(20240601)
    clean = rng.uniform(-1, 1, (6, 1))
    labels = rng.integers(0, 3, 6)
    poison = rng.uniform(-1, 1, (3, 1))
    sources = poison - 0.05
    tests = rng.uniform(-1, 1, (4, 1))
    s = KernelScenario(clean, labels, poison, sources, tests, target=1, gamma=1.0)
    want = direct_confidence(clean.tolist(), labels.tolist(), poison.tolist(), tests.tolist(), 1, 1.0)
    np.testing.assert_allclose(kernel_confidence(s), want, rtol=0, atol=1e-12)
    np.testing.assert_allclose(kernel_confidence(s, log_domain=False), want, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.sampled_from([1, 2, 8]), n=st.integers(1, 10))
def test_scores_match_term_by_term(seed, d, n):
    rng = np.random.default_rng(seed)
    geo = Geometry.draw(rng, n, d)
    s = geo.scenario(float(rng.uniform(0.001, 0.1)), float(rng.uniform(0.25, 1.0)), 1.0)
    cf = closed_form_score(s)
    want = direct_score(s.poison_x.tolist(), s.poison_sources.tolist(), s.test_x.tolist())
    np.testing.assert_allclose(cf.scores, want, rtol=1e-10)
    assert cf.singular.sum() == 0
    conf = kernel_confidence(s)
    assert np.all((conf > 0) & (conf < 1))
    np.testing.assert_allclose(conf, direct_confidence(s.clean_x.tolist(), s.clean_y.tolist(), s.poison_x.tolist(),
                                                       s.test_x.tolist(), 1, 1.0), rtol=1e-12)


def one_pair(disp=0.1, rel=0.2):
    return KernelScenario([[0.0]], [0], [[disp]], [[0.0]], [[disp - rel]])


def test_score_fifty():
    assert closed_form_score(one_pair()).scores[0] == pytest.approx(50.0, rel=1e-12)


def test_halving_displacement_doubles_score():
    x_t = np.array([[0.0, 0.0]])
    poison = np.array([[0.5, 0.2], [-0.3, 0.4]])
    disp = np.array([[0.04, 0.01], [-0.02, 0.03]])
    full = closed_form_score(KernelScenario(poison - disp, [0, 0], poison, poison - disp, x_t)).scores[0]
    half = closed_form_score(KernelScenario(poison - disp / 2, [0, 0], poison, poison - disp / 2, x_t)).scores[0]
    assert half == pytest.approx(2 * full, rel=1e-12)


@pytest.mark.parametrize("c", [0.5, 2.0, 4.0])
def test_scale_covariance(c):
    rng = np.random.default_rng(3)
    s = Geometry.draw(rng, 5, 3).scenario(0.02, 0.5, 1.0)
    scaled = KernelScenario(c * s.clean_x, s.clean_y, c * s.poison_x, c * s.poison_sources, c * s.test_x)
    dots = np.einsum("pd,pd->p", s.poison_x - s.poison_sources, s.poison_x - s.test_x)
    dots_c = np.einsum("pd,pd->p", scaled.poison_x - scaled.poison_sources, scaled.poison_x - scaled.test_x)
    np.testing.assert_allclose(1 / dots_c, (1 / dots) / c ** 2, rtol=1e-12)
    assert closed_form_score(scaled).scores[0] == pytest.approx(closed_form_score(s).scores[0] / c ** 2, rel=1e-12)


def test_singular_terms_excluded_and_counted():
    # second poison sits exactly on the test point
    s = KernelScenario([[0.0], [1.0]], [0, 0], [[0.1], [0.5]], [[0.0], [0.4]], [[0.5]])
    cf = closed_form_score(s)
    assert cf.singular[0] == 1
    assert cf.scores[0] == pytest.approx(1 / (0.1 * (0.1 - 0.5)), rel=1e-12)


def test_large_gamma_nearest_neighbour():
    rng = np.random.default_rng(7)
    for _ in range(20):
        clean = rng.uniform(0, 1, (5, 2))
        labels = rng.integers(0, 2, 5)
        poison = rng.uniform(0, 1, (2, 2))
        test = rng.uniform(0, 1, (1, 2))
        s = KernelScenario(clean, labels, poison, poison, test, target=1, gamma=1e6)
        pts = np.vstack([clean, poison])
        lab = np.concatenate([labels, [1, 1]])
        nearest = lab[np.argmin(((pts - test) ** 2).sum(1))]
        assert round(float(kernel_confidence(s)[0])) == int(nearest == 1)


def test_log_domain_survives_underflow():
    # every kernel weight is exp(-2000), which underflows; the ratio is still 1/2
    s = KernelScenario([[-1.0], [1.0]], [1, 0], np.zeros((0, 1)), np.zeros((0, 1)), [[0.0]], gamma=1000.0)
    assert kernel_confidence(s)[0] == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(DegenerateScenario):
        kernel_confidence(s, log_domain=False)


def test_scenario_invariants():
    with pytest.raises(ValueError):
        KernelScenario([[0.0, 1.0]], [0], [[0.0]], [[0.0]], [[0.0]])
    with pytest.raises(ValueError):
        KernelScenario([[0.0]], [0], [[0.0]], [[0.0]], [[0.0]], gamma=0)
    with pytest.raises(ValueError):
        KernelScenario([[0.0]], [0], [[0.0]], [[0.0]], [[0.0]], gamma=math.inf)


def test_similarity_sweep_monotone():
    rng = np.random.default_rng(11)
    for d in (1, 2, 8):
        geo = Geometry.draw(rng, 16, d)
        conf = [kernel_confidence(geo.scenario(g, 0.5, 1.0))[0] for g in np.geomspace(0.1, 0.001, 30)]
        assert np.all(np.diff(conf) > 0)


@pytest.fixture(scope="module")
def report():
    return verify_theorem(trials=200, dims=(1, 2, 8), rng=np.random.default_rng(0))


def test_regime_correlation(report):
    assert report["min_regime_spearman"] >= 0.9
    assert report["monotone_violations"] == 0
    for fams in report["families"].values():
        for n in (4, 8, 16, 32, 64):
            assert fams[f"joint/{n}"]["in_regime"]
            assert not fams[f"wide/{n}"]["in_regime"]
            assert not fams[f"target_clean/{n}"]["in_regime"]
            assert 0 < fams[f"target_clean/{n}"]["dropped_term_share"] < 1


def test_degenerate_family_undefined(report):
    for fams in report["families"].values():
        assert fams["degenerate"]["spearman"] is None and fams["degenerate"]["status"] == "undefined"
