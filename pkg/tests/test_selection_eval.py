import math
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

from mplnmix.em_engine import FitResult, Responsibilities
from mplnmix.mpln_core import ComponentParams, MixtureParams
from mplnmix.selection_eval import (
    adjusted_rand_index,
    count_free_params,
    information_criteria,
    map_consistency_check,
    select_best,
)


def hard_resp(labels, g):
    z = np.zeros((len(labels), g))
    z[np.arange(len(labels)), labels] = 1.0
    return Responsibilities.from_z(z)


def brute_force_ari(a, b):
    """Pair-counting oracle: agreement over all observation pairs."""
    n = len(a)
    n11 = n10 = n01 = 0
    for i, j in combinations(range(n), 2):
        same_a = a[i] == a[j]
        same_b = b[i] == b[j]
        if same_a and same_b:
            n11 += 1
        elif same_a:
            n10 += 1
        elif same_b:
            n01 += 1
    total = math.comb(n, 2)
    expected = Fraction((n11 + n10) * (n11 + n01), total)
    max_index = Fraction(2 * n11 + n10 + n01, 2)
    if max_index == expected:
        grp_a = [tuple(sorted(i for i in range(n) if a[i] == a[j])) for j in range(n)]
        grp_b = [tuple(sorted(i for i in range(n) if b[i] == b[j])) for j in range(n)]
        return 1.0 if grp_a == grp_b else 0.0
    return float((n11 - expected) / (max_index - expected))


class TestCountFreeParams:
    def test_two_components_d6(self):
        assert count_free_params(2, 6) == 55

    def test_one_component_d1(self):
        assert count_free_params(1, 1) == 2

    def test_three_components_d6(self):
        assert count_free_params(3, 6) == 83

    def test_formula(self):
        for g in range(1, 5):
            for d in range(1, 8):
                assert count_free_params(g, d) == (g - 1) + g * d + g * d * (d + 1) // 2


class TestInformationCriteria:
    def test_hand_case_hard_assignments(self):
        resp = hard_resp([0, 1] * 500, 2)
        c = information_criteria(-100.0, 2, 6, 1000, resp)
        assert c.k_free == 55
        assert c.aic == pytest.approx(310.0)
        assert c.bic == pytest.approx(200 + 55 * math.log(1000), rel=1e-12)
        assert c.bic == pytest.approx(579.93, abs=5e-3)
        assert c.aic3 == pytest.approx(365.0)
        assert c.icl == pytest.approx(c.bic)

    def test_uniform_resp_entropy_penalty(self):
        resp = Responsibilities.from_z(np.full((2, 2), 0.5))
        c = information_criteria(-10.0, 2, 1, 2, resp)
        assert c.icl - c.bic == pytest.approx(4 * math.log(2), rel=1e-12)
        assert c.icl - c.bic == pytest.approx(2.7726, abs=5e-5)

    def test_icl_equals_bic_iff_degenerate(self, rng):
        hard = hard_resp(list(rng.integers(0, 3, size=20)), 3)
        c_hard = information_criteria(-50.0, 3, 2, 20, hard)
        assert c_hard.icl == pytest.approx(c_hard.bic)
        soft = Responsibilities.from_z(rng.dirichlet(np.ones(3), size=20))
        c_soft = information_criteria(-50.0, 3, 2, 20, soft)
        assert c_soft.icl > c_soft.bic

    def test_icl_strict_sign_audit(self, rng):
        soft = Responsibilities.from_z(rng.dirichlet(np.ones(2), size=10))
        c = information_criteria(-5.0, 2, 1, 10, soft)
        assert c.icl_strict <= c.bic
        assert c.icl + c.icl_strict == pytest.approx(2 * c.bic, rel=1e-12)

    def test_penalties_increasing_in_k(self):
        resp = hard_resp([0, 1], 2)
        lo = information_criteria(-10.0, 2, 1, 2, resp)
        resp3 = hard_resp([0, 1, 2], 3)
        hi = information_criteria(-10.0, 3, 1, 3, resp3)
        assert hi.aic > lo.aic and hi.aic3 > lo.aic3

    def test_aic3_dominates_aic(self, rng):
        resp = hard_resp(list(rng.integers(0, 2, size=12)), 2)
        c = information_criteria(-33.0, 2, 4, 12, resp)
        assert c.aic3 >= c.aic

    def test_bic_penalty_vs_aic(self):
        big = information_criteria(-10.0, 2, 3, 20, hard_resp([0, 1] * 10, 2))
        assert big.bic > big.aic  # log 20 > 2
        small = information_criteria(-10.0, 2, 3, 7, hard_resp([0, 1, 0, 1, 0, 1, 0], 2))
        assert small.bic < small.aic  # log 7 < 2


def make_fit(g, criteria_values, loglik=-100.0):
    comps = tuple(ComponentParams(mu=np.zeros(1), sigma=np.eye(1)) for _ in range(g))
    params = MixtureParams(weights=np.full(g, 1.0 / g), components=comps)
    resp = hard_resp(list(np.arange(10) % g), g)
    fit = FitResult(params=params, resp=resp, loglik_trace=[loglik], converged=True,
                    em_iters_used=1, k_free=0, effective_map_clusters=g)
    from mplnmix.selection_eval import CriteriaSet

    fit.criteria = CriteriaSet(aic=criteria_values.get("aic", 0.0),
                               bic=criteria_values.get("bic", 0.0),
                               aic3=criteria_values.get("aic3", 0.0),
                               icl=criteria_values.get("icl", 0.0),
                               k_free=1, n_obs=10)
    return fit


class TestSelectBest:
    def test_single_candidate(self):
        g, table = select_best([make_fit(2, {"bic": 100.0})], "bic")
        assert g == 2
        assert len(table) == 1

    def test_argmin(self):
        fits = [make_fit(1, {"bic": 500.0}), make_fit(2, {"bic": 450.0}), make_fit(3, {"bic": 460.0})]
        g, table = select_best(fits, "bic")
        assert g == 2
        assert [row["g"] for row in table] == [2, 3, 1]

    def test_tie_breaks_to_smaller_g(self):
        fits = [make_fit(3, {"aic": 7.0}), make_fit(2, {"aic": 7.0})]
        g, _ = select_best(fits, "aic")
        assert g == 2

    def test_dominated_candidate_invariance(self):
        fits = [make_fit(1, {"icl": 500.0}), make_fit(2, {"icl": 450.0})]
        g1, _ = select_best(fits, "icl")
        g2, _ = select_best(fits + [make_fit(3, {"icl": 9999.0})], "icl")
        assert g1 == g2

    def test_unknown_criterion(self):
        with pytest.raises(ValueError):
            select_best([make_fit(1, {})], "loglik")

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best([], "bic")


class TestARI:
    def test_identical(self):
        assert adjusted_rand_index([0, 1, 2, 0], [0, 1, 2, 0]) == 1.0

    def test_hand_case(self):
        assert adjusted_rand_index([1, 1, 2, 2], [1, 2, 1, 2]) == -0.5

    def test_relabeling_invariance(self, rng):
        a = list(rng.integers(0, 3, size=30))
        b = list(rng.integers(0, 3, size=30))
        relabeled = [{0: 2, 1: 0, 2: 1}[v] for v in b]
        assert adjusted_rand_index(a, b) == adjusted_rand_index(a, relabeled)

    def test_symmetry(self, rng):
        a = list(rng.integers(0, 4, size=25))
        b = list(rng.integers(0, 3, size=25))
        assert adjusted_rand_index(a, b) == adjusted_rand_index(b, a)

    def test_degenerate_both_single_block(self):
        assert adjusted_rand_index([0, 0, 0], [5, 5, 5]) == 1.0

    def test_degenerate_all_singletons(self):
        assert adjusted_rand_index([0, 1, 2], [7, 8, 9]) == 1.0

    def test_singletons_vs_block(self):
        assert adjusted_rand_index([0, 1, 2], [1, 1, 1]) == 0.0

    def test_string_labels(self):
        assert adjusted_rand_index(["a", "a", "b", "b"], ["x", "y", "x", "y"]) == -0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            adjusted_rand_index([0, 1], [0, 1, 2])

    def test_brute_force_oracle_1000_pairs(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 11))
            a = list(rng.integers(0, rng.integers(1, 5), size=n))
            b = list(rng.integers(0, rng.integers(1, 5), size=n))
            assert adjusted_rand_index(a, b) == brute_force_ari(a, b)


class TestMapConsistency:
    def test_collapsed_to_one(self):
        resp = hard_resp([0, 0, 0, 0], 2)
        assert map_consistency_check(resp, 2) == (1, False)

    def test_balanced_three(self):
        resp = hard_resp([0, 1, 2, 0, 1, 2], 3)
        assert map_consistency_check(resp, 3) == (3, True)

    def test_empty_cluster_scenario(self):
        # one component soaks up every observation despite g = 2
        z = np.column_stack([np.full(8, 0.9), np.full(8, 0.1)])
        resp = Responsibilities.from_z(z)
        effective, ok = map_consistency_check(resp, 2)
        assert effective == 1
        assert not ok
