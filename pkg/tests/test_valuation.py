import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedval.game import GameStructure, UtilityTable, is_client_union, table_from_function
from fedval.valuation import (
    METRICS,
    CoefficientTable,
    SemivalueWeights,
    UnknownMetricError,
    Valuation,
    banzhaf,
    banzhaf_weights,
    beta_shapley,
    beta_weights,
    closed_form_sv_client_coeffs,
    compute,
    extract_coefficients,
    loo,
    semivalue,
    shapley,
    shapley_weights,
    truth_shapley,
)

import reference as ref

TWO_BLOCK = UtilityTable(GameStructure((1, 1)), [0.0, 1.0, 0.0, 3.0])


def unanimity(structure, carrier):
    return table_from_function(lambda s: float(set(carrier) <= set(s)), structure)


small_structures = st.lists(st.integers(1, 3), min_size=1, max_size=3).map(lambda m: GameStructure(tuple(m)))


class TestShapley:
    def test_cardinality(self):
        phi = shapley(table_from_function(len, GameStructure((3,))))
        np.testing.assert_allclose(phi.block_values, 1.0, atol=1e-12)

    def test_two_block_example(self):
        phi = shapley(TWO_BLOCK)
        np.testing.assert_allclose(phi.block_values, [2.0, 1.0], atol=1e-12)

    def test_unanimity(self):
        phi = shapley(unanimity(GameStructure((3,)), [0, 1]))
        np.testing.assert_allclose(phi.block_values, [0.5, 0.5, 0.0], atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(small_structures, st.integers(0, 2**31))
    def test_matches_permutation_average(self, s, seed):
        table = ref.random_table(s, np.random.default_rng(seed))
        phi = shapley(table)
        np.testing.assert_allclose(phi.block_values, ref.block_shapley(table.values, s.total_blocks), atol=1e-12)

    def test_client_values_sum_blocks(self, rng):
        s = GameStructure((2, 3, 1))
        phi = shapley(ref.random_table(s, rng))
        np.testing.assert_allclose(phi.client_values, [phi.block_values[:2].sum(), phi.block_values[2:5].sum(), phi.block_values[5]])

    def test_weights_no_overflow_at_cap(self):
        w = shapley_weights(20)
        assert np.all(np.isfinite(w.per_subset_weight)) and w.total_mass() == pytest.approx(1.0, abs=1e-12)
        for size in (0, 7, 19):
            assert w.per_subset_weight[size] == pytest.approx(ref.shapley_weight(20, size), rel=1e-13)


class TestLeaveOneOut:
    def test_cardinality(self):
        np.testing.assert_array_equal(loo(table_from_function(len, GameStructure((2, 2)))).block_values, 1.0)

    def test_constant_game(self):
        t = table_from_function(lambda s: 0.7 if s else 0.0, GameStructure((3,)))
        np.testing.assert_array_equal(loo(t).block_values, 0.0)

    def test_unanimity(self):
        np.testing.assert_array_equal(loo(unanimity(GameStructure((3,)), [0, 1])).block_values, [1, 1, 0])

    def test_matches_loop(self, rng):
        s = GameStructure((2, 2, 1))
        t = ref.random_table(s, rng)
        np.testing.assert_allclose(loo(t).block_values, ref.loop_loo(t.values, 5), atol=1e-15)


class TestSemivalues:
    def test_shapley_weights_reproduce_shapley(self, rng):
        t = ref.random_table(GameStructure((2, 3)), rng)
        np.testing.assert_allclose(
            semivalue(t, None, shapley_weights(5)).block_values, shapley(t).block_values, atol=1e-12
        )

    def test_banzhaf_two_block_example(self):
        np.testing.assert_allclose(banzhaf(TWO_BLOCK).block_values, [2.0, 1.0], atol=1e-12)

    def test_zero_game(self):
        t = UtilityTable(GameStructure((2, 1)), np.zeros(8))
        for metric in METRICS:
            assert not compute(metric, t).block_values.any()

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            SemivalueWeights(np.array([0.5, -0.1]))

    def test_weight_length_checked(self):
        with pytest.raises(ValueError):
            semivalue(TWO_BLOCK, None, shapley_weights(3))

    @pytest.mark.parametrize("metric", ["bv", "bsv"])
    def test_matches_loops(self, metric, rng):
        s = GameStructure((3, 2))
        t = ref.random_table(s, rng)
        if metric == "bv":
            expected = ref.loop_semivalue(t.values, 5, lambda k: 0.5**4)
        else:
            expected = ref.loop_semivalue(t.values, 5, lambda k: ref.integrated_beta_weight(5, 16.0, 1.0, k))
        np.testing.assert_allclose(compute(metric, t).block_values, expected, atol=1e-9)

    def test_banzhaf_weights(self):
        np.testing.assert_array_equal(banzhaf_weights(4).per_subset_weight, 1 / 8)


class TestBetaWeights:
    @pytest.mark.parametrize("n", range(1, 11))
    def test_beta_one_one_is_shapley(self, n):
        np.testing.assert_allclose(
            beta_weights(n, 1.0, 1.0).per_subset_weight,
            [ref.shapley_weight(n, s) for s in range(n)],
            rtol=1e-12,
        )

    def test_single_block(self):
        assert beta_weights(1, 16.0, 1.0).per_subset_weight.tolist() == pytest.approx([1.0])

    def test_sixteen_one_strictly_decreasing(self):
        w = beta_weights(9, 16.0, 1.0).per_subset_weight
        assert np.all(np.diff(w) < 0)

    @pytest.mark.parametrize("alpha, beta", [(16.0, 1.0), (4.0, 2.0), (0.5, 0.5), (1.0, 16.0)])
    def test_matches_integral(self, alpha, beta):
        n = 7
        w = beta_weights(n, alpha, beta)
        expected = [ref.integrated_beta_weight(n, alpha, beta, s) for s in range(n)]
        np.testing.assert_allclose(w.per_subset_weight, expected, rtol=1e-6)
        assert w.total_mass() == pytest.approx(1.0, abs=1e-12)

    def test_large_n_stays_finite(self):
        w = beta_weights(20, 16.0, 1.0)
        assert np.all(np.isfinite(w.per_subset_weight)) and w.total_mass() == pytest.approx(1.0)

    @pytest.mark.parametrize("alpha, beta", [(0.0, 1.0), (1.0, -2.0)])
    def test_invalid(self, alpha, beta):
        with pytest.raises(ValueError):
            beta_weights(3, alpha, beta)

    def test_beta_shapley_parameters_passed(self, rng):
        t = ref.random_table(GameStructure((4,)), rng)
        np.testing.assert_allclose(beta_shapley(t, 1.0, 1.0).block_values, shapley(t).block_values, atol=1e-12)


class TestTruthShapley:
    def test_hand_example(self):
        s = GameStructure((2, 1))
        phi = truth_shapley(table_from_function(len, s))
        np.testing.assert_allclose(phi.client_values, [2.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(phi.block_values, [1.0, 1.0, 1.0], atol=1e-12)

    def test_single_client_is_inner_shapley(self, rng):
        s = GameStructure((4,))
        t = ref.random_table(s, rng)
        phi = truth_shapley(t)
        # with one client the inner game is v itself
        np.testing.assert_allclose(phi.block_values, shapley(t).block_values, atol=1e-12)
        assert phi.client_values[0] == pytest.approx(t.grand, abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(small_structures, st.integers(0, 2**31))
    def test_matches_two_stage_reference(self, s, seed):
        t = ref.random_table(s, np.random.default_rng(seed))
        blocks, clients = ref.two_stage_truth_shapley(t.values, s.blocks_per_client)
        phi = truth_shapley(t)
        np.testing.assert_allclose(phi.block_values, blocks, atol=1e-12)
        np.testing.assert_allclose(phi.client_values, clients, atol=1e-12)

    def test_client_values_are_client_level_shapley(self, rng):
        s = GameStructure((2, 1, 2))
        t = ref.random_table(s, rng)
        expected = ref.permutation_shapley(lambda c: t[s.union_mask(c)], range(3))
        np.testing.assert_allclose(truth_shapley(t).client_values, [expected[i] for i in range(3)], atol=1e-12)

    def test_efficiency_inside_clients(self, rng):
        s = GameStructure((3, 2))
        phi = truth_shapley(ref.random_table(s, rng))
        np.testing.assert_allclose(phi.client_values, [phi.block_values[:3].sum(), phi.block_values[3:].sum()], atol=1e-12)


class TestCoefficients:
    def test_sv_two_singletons(self):
        c = extract_coefficients("sv", GameStructure((1, 1)))
        np.testing.assert_allclose(c.client_coeffs[0], [-0.5, 0.5, -0.5, 0.5], atol=1e-12)

    def test_loo_support(self):
        s = GameStructure((2, 1, 2))
        c = extract_coefficients("loo", s)
        for b in range(s.total_blocks):
            expected = np.zeros(s.num_subsets)
            expected[s.full_mask] = 1.0
            expected[s.full_mask & ~(1 << b)] = -1.0
            np.testing.assert_array_equal(c.block_coeffs[b], expected)

    def test_tsv_support(self):
        s = GameStructure((2, 1, 2))
        c = extract_coefficients("tsv", s)
        for m in range(s.num_subsets):
            if not is_client_union(m, s):
                assert np.abs(c.client_coeffs[:, m]).max() < 1e-12
        # beta_i(D_C) >= 0 whenever i is in C and C is proper
        for i in range(s.num_clients):
            for m in range(s.num_subsets - 1):
                if is_client_union(m, s) and m & s.client_masks[i]:
                    assert c.client_coeffs[i, m] >= -1e-12

    @pytest.mark.parametrize("blocks", [(1, 1), (2, 1), (3, 3, 3), (1, 2, 3, 1), (5,)])
    def test_closed_form(self, blocks):
        s = GameStructure(blocks)
        np.testing.assert_allclose(
            extract_coefficients("sv", s).client_coeffs, closed_form_sv_client_coeffs(s).client_coeffs, atol=1e-12
        )

    def test_closed_form_endpoints(self):
        s = GameStructure((2, 1, 3))
        c = closed_form_sv_client_coeffs(s).client_coeffs
        np.testing.assert_allclose(c[:, s.full_mask], [2 / 6, 1 / 6, 3 / 6])
        np.testing.assert_allclose(c[:, 0], [-2 / 6, -1 / 6, -3 / 6])

    @pytest.mark.parametrize("metric", METRICS)
    def test_round_trip(self, metric, rng):
        s = GameStructure((2, 2, 1))
        t = ref.random_table(s, rng)
        c = extract_coefficients(metric, s)
        direct = compute(metric, t)
        via = c.apply(t.values)
        np.testing.assert_allclose(via.block_values, direct.block_values, atol=1e-12)
        np.testing.assert_allclose(via.client_values, direct.client_values, atol=1e-12)
        np.testing.assert_allclose(c.client_coeffs, np.add.reduceat(c.block_coeffs, [0, 2, 4], axis=0), atol=1e-15)

    def test_others(self):
        c = extract_coefficients("sv", GameStructure((1, 2, 1)))
        np.testing.assert_allclose(c.others(1), c.client_coeffs[0] + c.client_coeffs[2])

    @pytest.mark.parametrize("metric", ["sv", "tsv"])
    def test_serialization(self, metric):
        s = GameStructure((2, 1))
        c = extract_coefficients(metric, s)
        for back in (CoefficientTable.from_json(c.to_json()), CoefficientTable.from_csv(c.to_csv(), metric, s)):
            assert back.client_coeffs.tobytes() == c.client_coeffs.tobytes()
            assert back.block_coeffs.tobytes() == c.block_coeffs.tobytes()

    def test_chunking_boundary(self):
        # 10 blocks -> 1024 columns, extracted in several chunks
        s = GameStructure((5, 5))
        np.testing.assert_allclose(
            extract_coefficients("sv", s).client_coeffs, closed_form_sv_client_coeffs(s).client_coeffs, atol=1e-12
        )

    def test_unknown_metric(self):
        with pytest.raises(UnknownMetricError):
            extract_coefficients("median", GameStructure((1,)))


class TestGeneralProperties:
    @pytest.mark.parametrize("metric", METRICS)
    def test_positive_scaling(self, metric, rng):
        t = ref.random_table(GameStructure((2, 2)), rng)
        scaled = UtilityTable(t.structure, 3.5 * t.values)
        np.testing.assert_allclose(compute(metric, scaled).block_values, 3.5 * compute(metric, t).block_values, atol=1e-12)

    @pytest.mark.parametrize("metric", ["sv", "loo", "tsv"])
    def test_additive_game_returns_weights(self, metric, rng):
        s = GameStructure((2, 3))
        weights = rng.normal(size=5)
        t = table_from_function(lambda blocks: float(sum(weights[b] for b in blocks)), s)
        np.testing.assert_allclose(compute(metric, t).block_values, weights, atol=1e-12)

    def test_valuation_serialization(self, rng):
        phi = truth_shapley(ref.random_table(GameStructure((2, 1)), rng))
        for back in (Valuation.from_json(phi.to_json()), Valuation.from_csv(phi.to_csv())):
            assert back.block_values.tobytes() == phi.block_values.tobytes()
            assert back.client_values.tobytes() == phi.client_values.tobytes()
            assert back.metric == "tsv" and back.structure.block_owner == phi.structure.block_owner

    def test_others(self):
        phi = Valuation(GameStructure((1, 1, 1)), np.array([1.0, 2.0, 4.0]), np.array([1.0, 2.0, 4.0]), "sv")
        assert phi.others(1) == 5.0
        assert math.isclose(phi.others(0), 6.0)
