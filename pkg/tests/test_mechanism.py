import numpy as np
import pytest

from qauction.errors import InvalidInputError
from qauction.mechanism import (
    MechanismOutcome,
    allocation_to_csv,
    check_feasibility,
    ir_check,
    outcome_to_json,
    utility,
    welfare,
)
from qauction.valuation import ActionCatalog, enumerate_bundles


@pytest.fixture
def index2():
    # two actions a, b -> bundles [{a}, {b}, {a,b}]
    return enumerate_bundles(ActionCatalog(("a", "b")))


@pytest.fixture
def index3():
    return enumerate_bundles(ActionCatalog())


class TestCheckFeasibility:
    def test_zero_matrix_ok(self, index2):
        rep = check_feasibility(np.zeros((2, 3)), index2)
        assert rep.ok
        assert rep.max_row_excess == 0.0
        assert rep.max_action_excess == 0.0

    def test_action_overload_detected(self, index2):
        x = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # action a assigned twice
        rep = check_feasibility(x, index2)
        assert not rep.ok
        assert rep.max_action_excess == pytest.approx(1.0)

    def test_hand_checked_ok_instance(self, index2):
        x = np.array([[0.5, 0.0, 0.5], [0.0, 0.5, 0.0]])
        rep = check_feasibility(x, index2)
        assert rep.ok
        assert rep.max_row_excess == 0.0
        assert rep.max_action_excess == 0.0

    def test_row_overload_detected(self, index2):
        x = np.array([[0.8, 0.8, 0.0]])
        rep = check_feasibility(x, index2)
        assert not rep.ok
        assert rep.max_row_excess == pytest.approx(0.6)

    def test_entries_outside_unit_interval_rejected(self, index2):
        with pytest.raises(InvalidInputError):
            check_feasibility(np.array([[1.5, 0.0, 0.0]]), index2)


class TestWelfare:
    def test_zero_allocation(self):
        assert welfare(np.zeros((2, 3)), np.ones((2, 3))) == 0.0

    def test_deterministic_single_assignment(self):
        x = np.zeros((1, 3))
        x[0, 2] = 1.0
        v = np.array([[0.1, 0.2, 0.7]])
        assert welfare(x, v) == pytest.approx(0.7)

    def test_dot_product_by_hand(self):
        assert welfare([[0.5, 0.5, 0.0]], [[0.2, 0.4, 0.9]]) == pytest.approx(0.3)

    def test_linearity_in_allocation(self):
        rng = np.random.default_rng(0)
        v = rng.random((3, 7))
        x1, x2 = rng.random((3, 7)), rng.random((3, 7))
        for alpha in (0.0, 0.25, 0.5, 1.0):
            mix = alpha * x1 + (1 - alpha) * x2
            assert welfare(mix, v) == pytest.approx(alpha * welfare(x1, v) + (1 - alpha) * welfare(x2, v))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            welfare(np.zeros((2, 3)), np.zeros((2, 4)))


class TestUtility:
    def test_zero_row_zero_payment(self):
        assert utility(0, np.zeros((1, 3)), [0.0], np.ones((1, 3))) == 0.0

    def test_value_minus_payment(self):
        x = np.array([[0.0, 1.0, 0.0]])
        v = np.array([[0.1, 0.8, 0.3]])
        assert utility(0, x, [0.3], v) == pytest.approx(0.5)

    def test_full_fraction_payment_is_ir_boundary(self):
        x = np.array([[0.5, 0.5, 0.0]])
        v = np.array([[0.6, 0.2, 0.9]])
        expected = 0.5 * 0.6 + 0.5 * 0.2
        assert utility(0, x, [expected], v) == pytest.approx(0.0)

    def test_bad_agent_index_rejected(self):
        with pytest.raises(InvalidInputError):
            utility(2, np.zeros((2, 3)), np.zeros(2), np.zeros((2, 3)))


class TestIrCheckAndOutcome:
    def test_zero_payments_all_ir(self):
        v = np.random.default_rng(1).random((3, 7))
        out = MechanismOutcome.from_parts(np.zeros((3, 7)), np.zeros(3), v)
        assert ir_check(out, v).all()

    def test_overcharged_agent_flagged(self):
        v = np.full((2, 3), 0.5)
        x = np.zeros((2, 3))
        x[0, 0] = 1.0
        out = MechanismOutcome.from_parts(x, np.array([0.6, 0.0]), v)
        flags = ir_check(out, v)
        assert not flags[0]
        assert flags[1]

    def test_revenue_and_welfare_derived(self):
        v = np.array([[0.2, 0.4, 0.9]])
        x = np.array([[0.0, 1.0, 0.0]])
        out = MechanismOutcome.from_parts(x, np.array([0.25]), v)
        assert out.revenue == pytest.approx(0.25)
        assert out.welfare == pytest.approx(0.4)

    def test_revenue_at_most_welfare_under_ir(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            v = rng.random((3, 7))
            x = rng.dirichlet(np.ones(8), size=3)[:, :7]  # row sums < 1
            expected = (x * v).sum(axis=1)
            p = expected * rng.random(3)  # payments below expected value -> IR
            out = MechanismOutcome.from_parts(x, p, v)
            assert ir_check(out, v).all()
            assert out.revenue <= out.welfare + 1e-9


class TestSerialization:
    def test_csv_layout(self, index3):
        x = np.zeros((2, 7))
        x[0, 2] = 1.0
        text = allocation_to_csv(x, index3)
        lines = text.strip().split("\n")
        assert lines[0].split(",")[2] == "Analyze+Remove"
        assert len(lines) == 3
        assert float(lines[1].split(",")[2]) == 1.0

    def test_json_roundtrip_fields(self, index3):
        v = np.random.default_rng(0).random((2, 7))
        out = MechanismOutcome.from_parts(np.zeros((2, 7)), np.zeros(2), v)
        doc = outcome_to_json(out, index3)
        assert set(doc) == {"bundles", "allocation", "payments", "revenue", "welfare"}
        assert len(doc["bundles"]) == 7
