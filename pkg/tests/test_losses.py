import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grebe.losses import compute_loss, logistic_loss, margin_loss, softmax_loss

from helpers import finite_diff, rel_err


class TestMargin:
    def test_satisfied_margin_is_zero(self):
        pos = np.array([1.0])
        neg = np.array([[0.0]])
        mask = np.zeros((1, 1), dtype=bool)
        loss, dpos, dneg = margin_loss(pos, neg, mask, 0.1)
        assert loss == 0.0
        assert dpos[0] == 0.0 and dneg[0, 0] == 0.0

    def test_violating_pair(self):
        loss, dpos, dneg = margin_loss(
            np.array([0.5]), np.array([[0.7]]), np.zeros((1, 1), dtype=bool), 0.1
        )
        assert loss == pytest.approx(0.3)
        assert dpos[0] == -1.0 and dneg[0, 0] == 1.0

    def test_all_masked_is_zero(self):
        loss, dpos, dneg = margin_loss(
            np.array([0.0]), np.array([[5.0, 9.0]]), np.ones((1, 2), dtype=bool), 0.1
        )
        assert loss == 0.0
        assert np.all(dpos == 0) and np.all(dneg == 0)

    def test_subgradient_zero_at_hinge_point(self):
        # pos - neg == margin exactly: not a strict violation
        loss, dpos, dneg = margin_loss(
            np.array([0.5]), np.array([[0.4]]), np.zeros((1, 1), dtype=bool), 0.1
        )
        assert loss == 0.0 and dpos[0] == 0.0 and dneg[0, 0] == 0.0


class TestLogistic:
    def test_saturation(self):
        loss, _, _ = logistic_loss(
            np.array([30.0]), np.array([[-30.0]]), np.zeros((1, 1), dtype=bool)
        )
        assert loss == pytest.approx(0.0, abs=1e-8)

    def test_hand_value_at_zero(self):
        loss, _, _ = logistic_loss(np.array([0.0]), np.array([[0.0]]), np.zeros((1, 1), dtype=bool))
        assert loss == pytest.approx(2 * np.log(2))


class TestSoftmax:
    def test_zero_negatives_zero_loss(self):
        loss, dpos, dneg = softmax_loss(
            np.array([0.7]), np.array([[3.0]]), np.ones((1, 1), dtype=bool)
        )
        assert loss == 0.0 and dpos[0] == 0.0 and np.all(dneg == 0)

    def test_uniform_scores(self):
        loss, _, _ = softmax_loss(np.array([0.0]), np.zeros((1, 99)), np.zeros((1, 99), dtype=bool))
        assert loss == pytest.approx(np.log(100.0))

    @given(st.floats(-50, 50))
    @settings(max_examples=25, deadline=None)
    def test_shift_invariance(self, c):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=3)
        neg = rng.normal(size=(3, 5))
        mask = rng.random((3, 5)) < 0.3
        l0, _, _ = softmax_loss(pos, neg, mask)
        l1, _, _ = softmax_loss(pos + c, neg + c, mask)
        assert l1 == pytest.approx(l0, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("kind", ["margin", "logistic", "softmax"])
def test_loss_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(1)
    pos = rng.normal(size=4)
    neg = rng.normal(size=(4, 6))
    mask = rng.random((4, 6)) < 0.25

    def value():
        return compute_loss(kind, pos, neg, mask, margin=0.3)[0]

    _, dpos, dneg = compute_loss(kind, pos, neg, mask, margin=0.3)
    assert rel_err(dpos, finite_diff(value, pos)) < 1e-5
    assert rel_err(dneg, finite_diff(value, neg)) < 1e-5


@pytest.mark.parametrize("kind", ["margin", "logistic", "softmax"])
def test_masked_entries_never_contribute(kind):
    rng = np.random.default_rng(2)
    pos = rng.normal(size=3)
    neg = rng.normal(size=(3, 5))
    mask = rng.random((3, 5)) < 0.4
    loss, _, dneg = compute_loss(kind, pos, neg, mask, margin=0.2)
    assert np.all(dneg[mask] == 0)
    # perturbing a masked score changes nothing
    neg2 = neg.copy()
    neg2[mask] += 100.0
    loss2, _, _ = compute_loss(kind, pos, neg2, mask, margin=0.2)
    assert loss2 == pytest.approx(loss, rel=1e-12)
