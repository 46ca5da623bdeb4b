import numpy as np
import pytest

from qauction.baselines import (
    MisreportSearchBudget,
    brute_force_wd,
    greedy_allocate,
    measured_regret,
    solve_wd,
    vcg_payments,
)
from qauction.errors import UnsupportedSizeError
from qauction.mechanism import MechanismOutcome, check_feasibility, ir_check, utility, welfare
from qauction.valuation import ActionCatalog, enumerate_bundles


@pytest.fixture
def index3():
    return enumerate_bundles(ActionCatalog())


@pytest.fixture
def index2():
    return enumerate_bundles(ActionCatalog(("a", "b")))


@pytest.fixture
def index1():
    return enumerate_bundles(ActionCatalog(("a",)))


class TestSolveWd:
    def test_single_agent_takes_argmax(self, index2):
        sol = solve_wd(np.array([[0.2, 0.5, 0.9]]), index2)
        assert sol.assignment == (2,)
        assert sol.welfare == pytest.approx(0.9)
        assert sol.used_actions == 0b11

    def test_two_agents_split_actions(self, index2):
        v = np.array([[0.9, 0.1, 0.5], [0.8, 0.7, 0.9]])
        sol = solve_wd(v, index2)
        assert sol.assignment == (0, 1)  # agent 0 -> {a}, agent 1 -> {b}
        assert sol.welfare == pytest.approx(1.6)

    def test_all_zero_prefers_null(self, index3):
        sol = solve_wd(np.zeros((3, 7)), index3)
        assert sol.assignment == (None, None, None)
        assert sol.welfare == 0.0
        assert sol.used_actions == 0

    def test_assignments_action_disjoint(self, index3):
        rng = np.random.default_rng(0)
        for _ in range(100):
            v = rng.random((4, 7))
            sol = solve_wd(v, index3)
            used = 0
            for j in sol.assignment:
                if j is None:
                    continue
                mask = index3.bundles[j].mask
                assert used & mask == 0
                used |= mask
            assert used == sol.used_actions

    def test_oversized_catalog_rejected(self):
        big = enumerate_bundles(ActionCatalog(tuple(f"a{i}" for i in range(17))))
        with pytest.raises(UnsupportedSizeError):
            solve_wd(np.zeros((1, big.num_bundles)), big)


class TestBruteForceAgreement:
    def test_matches_on_spec_examples(self, index2):
        for v in ([[0.2, 0.5, 0.9]], [[0.9, 0.1, 0.5], [0.8, 0.7, 0.9]]):
            a = solve_wd(np.array(v), index2)
            b = brute_force_wd(np.array(v), index2)
            assert a == b

    def test_empty_instance(self, index3):
        sol = brute_force_wd(np.zeros((0, 7)), index3)
        assert sol.assignment == ()
        assert sol.welfare == 0.0

    def test_random_instances_exact_match(self, index3):
        rng = np.random.default_rng(7)
        for _ in range(500):
            n = int(rng.integers(1, 5))
            v = rng.random((n, 7)) * rng.choice([0.3, 1.0, 3.0])
            a = solve_wd(v, index3)
            b = brute_force_wd(v, index3)
            assert a.welfare == b.welfare  # exact, not approx
            assert a.assignment == b.assignment

    def test_ties_resolved_identically(self, index3):
        rng = np.random.default_rng(8)
        for _ in range(200):
            # quantized values force many exact ties
            v = rng.integers(0, 3, size=(3, 7)).astype(float) / 2.0
            a = solve_wd(v, index3)
            b = brute_force_wd(v, index3)
            assert a == b

    def test_too_many_agents_rejected(self, index3):
        with pytest.raises(UnsupportedSizeError):
            brute_force_wd(np.zeros((7, 7)), index3)


class TestVcg:
    def test_single_agent_pays_nothing(self, index3):
        out = vcg_payments(np.array([[0.1, 0.5, 0.3, 0.2, 0.6, 0.4, 0.9]]), index3)
        assert out.payments[0] == 0.0
        assert out.revenue == 0.0

    def test_second_price_on_one_item(self, index1):
        out = vcg_payments(np.array([[0.9], [0.6]]), index1)
        winner = int(out.allocation.argmax()) // 1
        assert out.allocation[0, 0] == 1.0
        assert out.payments[0] == pytest.approx(0.6)
        assert out.payments[1] == 0.0

    def test_duplicate_bids_winner_pays_full_value(self, index1):
        v = np.array([[0.9], [0.9]])
        out = vcg_payments(v, index1)
        winner = int(out.allocation[:, 0].argmax())
        assert out.payments[winner] == pytest.approx(0.9)
        assert utility(winner, out.allocation, out.payments, v) == pytest.approx(0.0)

    def test_ir_and_marginal_contribution(self, index3):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            v = rng.random((n, 7))
            out = vcg_payments(v, index3)
            assert ir_check(out, v).all()
            sol = solve_wd(v, index3)
            for i in range(n):
                others = np.delete(v, i, axis=0)
                w_without = solve_wd(others, index3).welfare if n > 1 else 0.0
                u = utility(i, out.allocation, out.payments, v)
                assert u == pytest.approx(sol.welfare - w_without, abs=1e-12)
                ji = sol.assignment[i]
                vi = v[i, ji] if ji is not None else 0.0
                assert -1e-12 <= out.payments[i] <= vi + 1e-12

    def test_outcome_feasible(self, index3):
        rng = np.random.default_rng(2)
        for _ in range(50):
            v = rng.random((4, 7))
            out = vcg_payments(v, index3)
            assert check_feasibility(out.allocation, index3).ok


class TestGreedy:
    def test_one_hot_at_argmax(self, index2):
        x = greedy_allocate(np.array([[0.2, 0.9, 0.5]]), index2)
        np.testing.assert_array_equal(x, [[0.0, 1.0, 0.0]])

    def test_joint_infeasibility_allowed(self, index3):
        v = np.zeros((2, 7))
        v[:, 6] = 1.0  # both agents want the full bundle
        x = greedy_allocate(v, index3)
        np.testing.assert_array_equal(x[:, 6], [1.0, 1.0])
        assert not check_feasibility(x, index3).ok

    def test_batch_frequency_average(self, index3):
        rows = []
        for pick in (6, 6, 6, 0):
            v = np.zeros((1, 7))
            v[0, pick] = 1.0
            rows.append(greedy_allocate(v, index3)[0])
        avg = np.mean(rows, axis=0)
        np.testing.assert_allclose(avg, [0.25, 0, 0, 0, 0, 0, 0.75])

    def test_tie_goes_to_lowest_bundle(self, index3):
        x = greedy_allocate(np.full((1, 7), 0.5), index3)
        np.testing.assert_array_equal(x, [[1, 0, 0, 0, 0, 0, 0]])

    def test_oracle_dominates_feasible_greedy(self, index3):
        # when greedy happens to be feasible its welfare cannot beat the oracle
        rng = np.random.default_rng(3)
        for _ in range(200):
            v = rng.random((2, 7))
            x = greedy_allocate(v, index3)
            if check_feasibility(x, index3).ok:
                assert welfare(x, v) <= solve_wd(v, index3).welfare + 1e-12


def _first_price_single_item(reported: np.ndarray) -> MechanismOutcome:
    """Pay-your-bid mechanism on one item; ties go to the lowest agent index."""
    bids = reported[:, 0]
    winner = int(np.argmax(bids))
    x = np.zeros_like(reported)
    x[winner, 0] = 1.0
    p = np.zeros(reported.shape[0])
    p[winner] = bids[winner]
    return MechanismOutcome.from_parts(x, p, reported)


class TestMeasuredRegret:
    def test_constant_mechanism_has_zero_regret(self, index3):
        v = np.random.default_rng(0).random((2, 7))
        fixed = MechanismOutcome.from_parts(np.zeros((2, 7)), np.zeros(2), v)

        def mech(reported):
            return fixed

        fast = MisreportSearchBudget(refine_steps=5, coordinate_passes=1)
        assert measured_regret(mech, v, 0, fast) == 0.0

    def test_vcg_has_negligible_regret(self, index3):
        rng = np.random.default_rng(4)
        mech = lambda reported: vcg_payments(reported, index3)
        for _ in range(5):
            n = int(rng.integers(1, 4))
            v = rng.random((n, 7))
            for i in range(n):
                assert measured_regret(mech, v, i) <= 1e-6

    def test_first_price_shading_found(self, index1):
        # truthful utility is 0 (pays own bid); best deviation bids the
        # runner-up's value exactly (tie resolves to agent 0), gaining 0.3
        v = np.array([[0.9], [0.6]])
        regret = measured_regret(_first_price_single_item, v, 0)
        assert regret == pytest.approx(0.9 - 0.6, abs=1e-6)

    def test_never_negative(self, index1):
        v = np.array([[0.2], [0.9]])
        regret = measured_regret(_first_price_single_item, v, 0)
        assert regret >= 0.0
