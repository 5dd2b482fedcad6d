import itertools

import numpy as np
import pytest

from fedval.attack import (
    AttackAction,
    AttackExecutionError,
    AttackPlan,
    ExactKnowledge,
    SubsetPrior,
    decide,
    empirical_values,
    execute_attack,
    expected_coefficients,
    plan_attack,
    plan_attack_incomplete,
    shift_oracle,
)
from fedval.game import GameStructure, UtilityTable, client_blocks, is_full_client_subset
from fedval.valuation import METRICS, compute, extract_coefficients

import reference as ref

H, P, N = AttackAction.HONEST, AttackAction.POSITIVE, AttackAction.NEGATIVE
S333 = GameStructure((3, 3, 3))


@pytest.fixture(scope="module")
def coeffs():
    return {m: extract_coefficients(m, S333) for m in METRICS}


class TestDecisionRule:
    @pytest.mark.parametrize(
        "own, others, expected",
        [
            (1.0, -1.0, P),
            (1.0, 0.0, P),
            (1.0, 0.5, H),
            (-1.0, 1.0, N),
            (-1.0, 0.0, N),
            (-1.0, -0.5, H),
            (0.0, -1.0, H),
            (0.0, 1.0, H),
            (1e-13, -1.0, H),
            (0.5, 1e-13, P),
        ],
    )
    def test_table(self, own, others, expected):
        assert decide(own, others) is expected


class TestPlan:
    def test_loo_deflates_leave_one_out_subsets(self, coeffs):
        plan = plan_attack(coeffs["loo"], 1)
        for b in S333.client_blocks_of(1):
            assert plan.action(S333.full_mask & ~(1 << b)) is N
        assert plan.count(N) == 3 and plan.count(P) == 0

    def test_tsv_honest_off_full_client_subsets(self, coeffs):
        for attacker in range(3):
            plan = plan_attack(coeffs["tsv"], attacker)
            for m in range(1, S333.full_mask):
                if not is_full_client_subset(m, attacker, S333):
                    assert plan.action(m) is H

    @pytest.mark.parametrize("metric", METRICS)
    def test_disjoint_subsets_honest(self, metric, coeffs):
        plan = plan_attack(coeffs[metric], 0)
        own = S333.client_masks[0]
        assert all(plan.action(m) is H for m in range(S333.full_mask) if not m & own)

    def test_matches_rule_pointwise(self, coeffs):
        c = coeffs["sv"]
        plan = plan_attack(c, 2)
        own, others = c.client_coeffs[2], c.others(2)
        for m in range(1, S333.full_mask):
            if m & S333.client_masks[2]:
                assert plan.action(m) is decide(own[m], others[m])

    def test_full_mask_absent(self, coeffs):
        plan = plan_attack(coeffs["sv"], 0)
        with pytest.raises(KeyError):
            plan.action(S333.full_mask)
        assert S333.full_mask not in plan.actions
        assert len(plan.actions) == S333.num_subsets - 1

    def test_attacker_range(self, coeffs):
        with pytest.raises(IndexError):
            plan_attack(coeffs["sv"], 3)

    def test_json_round_trip(self, coeffs):
        plan = plan_attack(coeffs["bv"], 1)
        assert AttackPlan.from_json(plan.to_json()).same_as(plan)

    def test_honest_plan(self):
        plan = AttackPlan.honest(S333, 0)
        assert plan.manipulated() == []


class TestIncompleteKnowledge:
    def test_point_mass_matches_exact(self, coeffs):
        for metric in METRICS:
            exact = plan_attack(coeffs[metric], 1)
            degenerate = plan_attack_incomplete(coeffs[metric], 1, None, ExactKnowledge(S333, 1))
            assert degenerate.same_as(exact)

    def test_point_mass_prior_expectation(self, coeffs):
        c = coeffs["sv"]
        prior = SubsetPrior.point_mass(S333, 0, 0b000_010_011)
        got = expected_coefficients(c, 0, 0b011, prior)
        assert got == pytest.approx((c.client_coeffs[0, 0b000_010_011], c.others(0)[0b000_010_011]))

    def test_uniform_conditional(self):
        prior = SubsetPrior.uniform(S333, 1)
        for o in (0b000_001_000, 0b000_111_000):
            support, p = prior.conditional(o)
            assert p.sum() == pytest.approx(1.0)
            assert all(client_blocks(int(m), 1, S333) == o for m in support)
            assert S333.full_mask not in support
        # o = D_1 excludes the full mask: 2^6 - 1 consistent proper subsets
        assert len(prior.conditional(0b000_111_000)[0]) == 63

    def test_conditional_errors(self):
        prior = SubsetPrior.uniform(S333, 0)
        with pytest.raises(ValueError):
            prior.conditional(0b1000)
        with pytest.raises(ValueError):
            SubsetPrior.point_mass(S333, 0, 0b1).conditional(0b10)

    def test_expectation_matches_brute_force(self, coeffs):
        c = coeffs["sv"]
        o = 0b001
        consistent = [m for m in range(S333.full_mask) if m & 0b111 == o]
        want_own = np.mean([c.client_coeffs[0, m] for m in consistent])
        want_others = np.mean([c.others(0)[m] for m in consistent])
        got = expected_coefficients(c, 0, o, SubsetPrior.uniform(S333, 0))
        assert got == pytest.approx((want_own, want_others), abs=1e-15)

    def test_sv_full_own_block_set_has_positive_expectation(self, coeffs):
        own, _ = expected_coefficients(coeffs["sv"], 2, S333.client_masks[2], SubsetPrior.uniform(S333, 2))
        assert own > 0

    @pytest.mark.parametrize("metric", METRICS)
    def test_action_constant_per_observation(self, metric, coeffs):
        plan = plan_attack_incomplete(coeffs[metric], 0, S333, SubsetPrior.uniform(S333, 0))
        by_obs = {}
        for m in range(1, S333.full_mask):
            if m & 0b111:
                by_obs.setdefault(m & 0b111, set()).add(plan.action(m))
        assert all(len(a) == 1 for a in by_obs.values())


class TestExecution:
    def test_all_honest_equals_honest_table(self, rng):
        t = ref.random_table(S333, rng)
        out = execute_attack(AttackPlan.honest(S333, 0), shift_oracle(t, 0.1))
        assert out.values.tobytes() == t.values.tobytes() and out.attacked

    def test_shift_exactly_on_planned(self, coeffs, rng):
        t = ref.random_table(S333, rng)
        plan = plan_attack(coeffs["sv"], 1)
        out = execute_attack(plan, shift_oracle(t, 0.1))
        sign = {H: 0.0, P: 1.0, N: -1.0}
        for m in range(S333.full_mask):
            assert out[m] == t[m] + 0.1 * sign[plan.action(m)]
        assert out.grand == t.grand

    def test_reuse_of_honest_values(self, coeffs, rng):
        t = ref.random_table(S333, rng)
        plan = plan_attack(coeffs["loo"], 0)
        seen = []

        def oracle(mask, action):
            seen.append(mask)
            return t[mask] - 1.0

        execute_attack(plan, oracle, honest=t)
        assert sorted(seen) == sorted(plan.manipulated())

    def test_oracle_failure_has_mask(self, coeffs):
        plan = plan_attack(coeffs["sv"], 0)

        def oracle(mask, action):
            if mask == 5:
                raise RuntimeError("boom")
            return 0.0

        with pytest.raises(AttackExecutionError, match="mask 5") as exc:
            execute_attack(plan, oracle)
        assert exc.value.mask == 5

    def test_sv_gain_is_planned_coefficient_mass(self, coeffs, rng):
        t = ref.random_table(S333, rng)
        c = coeffs["sv"]
        plan = plan_attack(c, 0)
        delta = 0.1
        attacked = empirical_values("sv", c, execute_attack(plan, shift_oracle(t, delta)))
        truthful = compute("sv", t)
        mass = sum(abs(c.client_coeffs[0, m]) for m in plan.manipulated())
        assert attacked.client_values[0] - truthful.client_values[0] == pytest.approx(delta * mass, abs=1e-12)

    @pytest.mark.parametrize("metric", METRICS)
    def test_empirical_honest_round_trip(self, metric, coeffs, rng):
        t = ref.random_table(S333, rng)
        phi = empirical_values(metric, coeffs[metric], t)
        np.testing.assert_allclose(phi.block_values, compute(metric, t).block_values, atol=1e-9)

    def test_empirical_rejects_mismatched_structure(self, coeffs):
        t = UtilityTable(GameStructure((1,)), [0.0, 1.0])
        with pytest.raises(ValueError):
            empirical_values("sv", coeffs["sv"], t)

    def test_tsv_unchanged_when_unions_honest(self, coeffs, rng):
        t = ref.random_table(S333, rng)
        c = coeffs["tsv"]
        codes = rng.integers(-1, 2, S333.num_subsets).astype(np.int8)
        for m in range(S333.num_subsets):
            if any(is_full_client_subset(m, i, S333) for i in range(3)) or not m & S333.client_masks[0]:
                codes[m] = 0
        attacked = empirical_values("tsv", c, execute_attack(AttackPlan(S333, 0, codes), shift_oracle(t, 0.5)))
        truthful = empirical_values("tsv", c, t)
        assert attacked.client_values.tobytes() == truthful.client_values.tobytes()
        # block-level coefficients do weight partial own subsets, so an
        # arbitrary plan can still reshuffle value inside a client
        assert not np.array_equal(attacked.block_values, truthful.block_values)

    def test_tsv_exact_plan_leaves_blocks_unchanged(self, coeffs, rng):
        t = ref.random_table(S333, rng)
        c = coeffs["tsv"]
        for attacker in range(3):
            plan = plan_attack(c, attacker)
            attacked = empirical_values("tsv", c, execute_attack(plan, shift_oracle(t, 0.5, attacker)))
            truthful = empirical_values("tsv", c, t)
            assert attacked.block_values.tobytes() == truthful.block_values.tobytes()

    def test_attacker_aware_shift_oracle(self, rng):
        s = GameStructure((2, 1))
        t = ref.random_table(s, rng)
        oracle = shift_oracle(t, 1.0, attacker=0)
        assert oracle(0b011, P) == t[0b011]
        assert oracle(0b001, P) == t[0b001] + 1.0
        assert oracle(0b011, N) == t[0b011] - 1.0


@pytest.mark.parametrize("metric", ["sv", "loo", "bsv", "bv"])
def test_direction_on_random_structures(metric):
    rng = np.random.default_rng(11)
    for blocks in itertools.islice(itertools.product([1, 2, 3], repeat=3), 0, 27, 4):
        s = GameStructure(blocks)
        c = extract_coefficients(metric, s)
        t = ref.random_table(s, rng)
        truthful = compute(metric, t)
        for attacker in range(3):
            attacked = empirical_values(metric, c, execute_attack(plan_attack(c, attacker), shift_oracle(t, 0.05)))
            assert attacked.client_values[attacker] >= truthful.client_values[attacker] - 1e-12
            assert attacked.others(attacker) <= truthful.others(attacker) + 1e-12
