"""Presence-only multi-label losses: frozen hand values, gradients, and the
entropy-replacement relationships between the two loss families."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sinr.losses import (
    BatchTargets,
    LossConfig,
    LossVariant,
    bernoulli_entropy,
    compute_loss,
    loss_an_full,
    loss_an_slds,
    loss_an_ssdl,
    loss_me_full,
    loss_me_slds,
    loss_me_ssdl,
    needs_pseudo_negatives,
)


def one_row_targets(j: int, n_species: int) -> BatchTargets:
    return BatchTargets(np.array([j], dtype=np.int64), n_species)


def entropy_ref(p: float) -> float:
    if p in (0.0, 1.0):
        return 0.0
    return -(p * math.log(p) + (1.0 - p) * math.log(1.0 - p))


# ---------------------------------------------------------------------------
# Frozen hand values (recomputed in-test from the definitions)
# ---------------------------------------------------------------------------


def test_ssdl_hand_value_and_gradients():
    value, d_y, d_y_rand = loss_an_ssdl(
        np.array([[0.8]]), np.array([[0.6]]), one_row_targets(0, 1)
    )
    expected = -math.log(0.8) - math.log(1.0 - 0.6)
    assert abs(expected - 1.1394342831883648) < 1e-15
    assert abs(value - expected) < 1e-12
    # d/dy = -1/0.8, d/dy' = +1/(1-0.6): pushing the pseudo-negative up
    # raises the loss, hence the positive sign.
    np.testing.assert_allclose(d_y, [[-1.25]], atol=1e-12)
    np.testing.assert_allclose(d_y_rand, [[2.5]], atol=1e-12)


def test_slds_hand_value():
    value, d_y, j_prime = loss_an_slds(
        np.array([[0.8, 0.3]]), one_row_targets(0, 2), j_prime=np.array([1])
    )
    expected = -math.log(0.8) - math.log(1.0 - 0.3)
    assert abs(expected - 0.5798184952529422) < 1e-15
    assert abs(value - expected) < 1e-12
    np.testing.assert_array_equal(j_prime, [1])
    np.testing.assert_allclose(d_y, [[-1.25, 1.0 / 0.7]], atol=1e-12)


def test_full_single_species_hand_value():
    value, _, _ = loss_an_full(
        np.array([[0.5]]), np.array([[0.5]]), one_row_targets(0, 1), 1.0
    )
    assert abs(value - 2.0 * math.log(2.0)) < 1e-12
    assert abs(2.0 * math.log(2.0) - 1.3862943611198906) < 1e-15


def test_full_two_species_hand_value():
    value, _, _ = loss_an_full(
        np.array([[0.8, 0.3]]), np.array([[0.6, 0.9]]), one_row_targets(0, 2), 2048.0
    )
    expected = -0.5 * (
        2048.0 * math.log(0.8) + math.log(0.7) + math.log(0.4) + math.log(0.1)
    )
    assert abs(expected - 230.2867719301542) < 1e-10
    assert abs(value - expected) < 1e-9


def test_full_near_perfect_predictions_drive_loss_to_zero():
    y = np.array([[1.0 - 1e-9, 1e-9, 1e-9]])
    y_rand = np.full((1, 3), 1e-9)
    value, _, _ = loss_an_full(y, y_rand, one_row_targets(0, 3), 1.0)
    assert 0.0 <= value < 1e-6


def test_me_ssdl_hand_value():
    value, d_y, d_y_rand = loss_me_ssdl(
        np.array([[0.8]]), np.array([[0.6]]), one_row_targets(0, 1)
    )
    expected = -math.log(0.8) + entropy_ref(0.6)
    assert abs(expected - 0.8961552183234662) < 1e-15
    assert abs(value - expected) < 1e-12
    np.testing.assert_allclose(d_y, [[-1.25]], atol=1e-12)
    # dH/dp = log((1-p)/p)
    np.testing.assert_allclose(d_y_rand, [[math.log(0.4 / 0.6)]], atol=1e-12)


def test_entropy_values_and_range():
    assert abs(bernoulli_entropy(0.25) - 0.5623351446188083) < 1e-15
    assert abs(bernoulli_entropy(0.25) - entropy_ref(0.25)) < 1e-15
    assert abs(bernoulli_entropy(0.5) - math.log(2.0)) < 1e-15
    assert bernoulli_entropy(0.0) == 0.0
    assert bernoulli_entropy(1.0) == 0.0
    ps = np.linspace(0.0, 1.0, 101)
    hs = bernoulli_entropy(ps)
    assert np.all(hs >= 0.0) and np.all(hs <= math.log(2.0) + 1e-15)
    np.testing.assert_allclose(hs, hs[::-1], atol=1e-15)  # symmetric about 0.5


# ---------------------------------------------------------------------------
# Family relationships
# ---------------------------------------------------------------------------


def test_me_equals_an_when_replaced_terms_are_half():
    """With every entropy-replaced prediction at 0.5, H(0.5) = -log(0.5), so
    each pair of variants must agree to machine precision."""
    rng = np.random.default_rng(5)
    b, s = 6, 4
    targets = BatchTargets(rng.integers(0, s, b).astype(np.int64), s)
    y_pos_only = np.full((b, s), 0.5)
    y_pos_only[np.arange(b), targets.positive_index] = rng.uniform(0.05, 0.95, b)
    y_half = np.full((b, s), 0.5)

    v_an, _, _ = loss_an_ssdl(y_pos_only, y_half, targets)
    v_me, _, _ = loss_me_ssdl(y_pos_only, y_half, targets)
    assert abs(v_an - v_me) < 1e-12

    jp = np.array([(t + 1) % s for t in targets.positive_index])
    v_an, _, _ = loss_an_slds(y_pos_only, targets, j_prime=jp)
    v_me, _, _ = loss_me_slds(y_pos_only, targets, j_prime=jp)
    assert abs(v_an - v_me) < 1e-12

    v_an, _, _ = loss_an_full(y_pos_only, y_half, targets, 7.0)
    v_me, _, _ = loss_me_full(y_pos_only, y_half, targets, 7.0)
    assert abs(v_an - v_me) < 1e-12


def test_full_reduces_to_ssdl_for_single_species_unit_weight():
    rng = np.random.default_rng(9)
    b = 8
    y = rng.uniform(0.1, 0.9, (b, 1))
    y_rand = rng.uniform(0.1, 0.9, (b, 1))
    targets = BatchTargets(np.zeros(b, dtype=np.int64), 1)
    v_full, dy_full, dyr_full = loss_an_full(y, y_rand, targets, 1.0)
    v_ssdl, dy_ssdl, dyr_ssdl = loss_an_ssdl(y, y_rand, targets)
    assert abs(v_full - v_ssdl) < 1e-12
    np.testing.assert_allclose(dy_full, dy_ssdl, atol=1e-12)
    np.testing.assert_allclose(dyr_full, dyr_ssdl, atol=1e-12)


def test_full_is_affine_in_lambda():
    rng = np.random.default_rng(13)
    b, s = 5, 7
    y = rng.uniform(0.05, 0.95, (b, s))
    y_rand = rng.uniform(0.05, 0.95, (b, s))
    targets = BatchTargets(rng.integers(0, s, b).astype(np.int64), s)

    def value(lam):
        v, _, _ = loss_an_full(y, y_rand, targets, lam)
        return v

    v1, v2, v9 = value(1.0), value(2.0), value(9.0)
    # L(lam) = base + lam * positive_part, so slopes between any two points agree
    assert abs((v9 - v1) / 8.0 - (v2 - v1)) < 1e-10
    # and the slope is the mean positive-term magnitude itself
    rows = np.arange(b)
    pos_part = float(np.mean(-np.log(y[rows, targets.positive_index]) / s))
    assert abs((v2 - v1) - pos_part) < 1e-10


def test_slds_draw_is_uniform_over_non_positives():
    s = 5
    b = 10000
    rng = np.random.default_rng(123)
    targets = BatchTargets(np.full(b, 2, dtype=np.int64), s)
    y = np.full((b, s), 0.5)
    _, _, j_prime = loss_an_slds(y, targets, rng=rng)
    assert not np.any(j_prime == 2)
    for j in (0, 1, 3, 4):
        freq = float(np.mean(j_prime == j))
        assert abs(freq - 0.25) < 0.02, (j, freq)


def test_slds_requires_two_species():
    with pytest.raises(ValueError):
        loss_an_slds(np.array([[0.5]]), one_row_targets(0, 1), rng=np.random.default_rng(0))


def test_slds_rejects_j_prime_equal_to_positive():
    with pytest.raises(ValueError):
        loss_an_slds(np.array([[0.5, 0.5]]), one_row_targets(0, 2), j_prime=np.array([0]))


# ---------------------------------------------------------------------------
# Batch-mean convention and numerical safety
# ---------------------------------------------------------------------------


def test_batch_mean_and_gradient_scaling():
    """Duplicating a batch leaves the value unchanged and halves each row's
    gradient (the mean's 1/B enters the per-row derivative)."""
    y = np.array([[0.7, 0.2]])
    y_rand = np.array([[0.4, 0.6]])
    t1 = one_row_targets(0, 2)
    t2 = BatchTargets(np.array([0, 0], dtype=np.int64), 2)
    v1, d1, dr1 = loss_an_full(y, y_rand, t1, 3.0)
    v2, d2, dr2 = loss_an_full(np.repeat(y, 2, 0), np.repeat(y_rand, 2, 0), t2, 3.0)
    assert abs(v1 - v2) < 1e-12
    np.testing.assert_allclose(d2, np.repeat(d1 / 2.0, 2, 0), atol=1e-12)
    np.testing.assert_allclose(dr2, np.repeat(dr1 / 2.0, 2, 0), atol=1e-12)


def test_extreme_predictions_stay_finite():
    y = np.array([[0.0, 1.0, 0.5]])
    y_rand = np.array([[1.0, 0.0, 0.5]])
    targets = one_row_targets(0, 3)
    for fn in (loss_an_ssdl, loss_me_ssdl):
        value, d_y, d_y_rand = fn(y, y_rand, targets)
        assert np.isfinite(value) and value >= 0.0
        assert np.all(np.isfinite(d_y)) and np.all(np.isfinite(d_y_rand))
    for fn in (loss_an_full, loss_me_full):
        value, d_y, d_y_rand = fn(y, y_rand, targets, 2048.0)
        assert np.isfinite(value) and value >= 0.0
        assert np.all(np.isfinite(d_y)) and np.all(np.isfinite(d_y_rand))
    value, d_y, _ = loss_an_slds(y, targets, j_prime=np.array([1]))
    assert np.isfinite(value) and np.all(np.isfinite(d_y))


@settings(max_examples=60, derandomize=True)
@given(
    y_pos=st.floats(0.0, 1.0),
    y_neg=st.floats(0.0, 1.0),
    y_rand=st.floats(0.0, 1.0),
    lam=st.floats(0.01, 4096.0),
)
def test_losses_are_finite_and_nonnegative(y_pos, y_neg, y_rand, lam):
    y = np.array([[y_pos, y_neg]])
    yr = np.array([[y_rand, y_rand]])
    targets = one_row_targets(0, 2)
    values = [
        loss_an_ssdl(y, yr, targets)[0],
        loss_me_ssdl(y, yr, targets)[0],
        loss_an_slds(y, targets, j_prime=np.array([1]))[0],
        loss_me_slds(y, targets, j_prime=np.array([1]))[0],
        loss_an_full(y, yr, targets, lam)[0],
        loss_me_full(y, yr, targets, lam)[0],
    ]
    for v in values:
        assert math.isfinite(v) and v >= 0.0


# ---------------------------------------------------------------------------
# Dispatcher and config plumbing
# ---------------------------------------------------------------------------


def test_needs_pseudo_negatives_table():
    expected = {
        LossVariant.AN_SSDL: True,
        LossVariant.ME_SSDL: True,
        LossVariant.AN_FULL: True,
        LossVariant.ME_FULL: True,
        LossVariant.AN_SLDS: False,
        LossVariant.ME_SLDS: False,
    }
    for variant, needed in expected.items():
        assert needs_pseudo_negatives(variant) is needed


def test_compute_loss_dispatch_matches_direct_calls():
    rng = np.random.default_rng(21)
    b, s = 4, 3
    y = rng.uniform(0.1, 0.9, (b, s))
    yr = rng.uniform(0.1, 0.9, (b, s))
    targets = BatchTargets(rng.integers(0, s, b).astype(np.int64), s)

    res = compute_loss(LossConfig(LossVariant.AN_FULL, lam=11.0), y, targets, y_hat_rand=yr)
    direct = loss_an_full(y, yr, targets, 11.0)
    assert abs(res.value - direct[0]) < 1e-15
    np.testing.assert_array_equal(res.d_y_hat, direct[1])
    np.testing.assert_array_equal(res.d_y_hat_rand, direct[2])

    jp = (targets.positive_index + 1) % s
    res = compute_loss(LossConfig(LossVariant.ME_SLDS), y, targets, j_prime=jp)
    direct = loss_me_slds(y, targets, j_prime=jp)
    assert abs(res.value - direct[0]) < 1e-15
    np.testing.assert_array_equal(res.j_prime, jp)


def test_compute_loss_requires_pseudo_predictions_when_needed():
    y = np.array([[0.5, 0.5]])
    targets = one_row_targets(0, 2)
    with pytest.raises(ValueError):
        compute_loss(LossConfig(LossVariant.AN_SSDL), y, targets)
    with pytest.raises(ValueError):
        compute_loss(LossConfig(LossVariant.AN_SLDS), y, targets)  # no rng, no j_prime


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(LossVariant.AN_FULL, lam=0.0)
    with pytest.raises(ValueError):
        LossConfig(LossVariant.AN_FULL, lam=-1.0)
    assert LossConfig("an-full").variant is LossVariant.AN_FULL


def test_batch_targets_validation():
    with pytest.raises(ValueError):
        BatchTargets(np.array([3]), 3)  # index out of range
    with pytest.raises(ValueError):
        BatchTargets(np.array([-1]), 3)
    with pytest.raises(ValueError):
        BatchTargets(np.array([[0]]), 3)  # wrong rank


def test_shape_mismatch_rejected():
    targets = one_row_targets(0, 2)
    with pytest.raises(ValueError):
        loss_an_ssdl(np.array([[0.5, 0.5]]), np.array([[0.5]]), targets)
    with pytest.raises(ValueError):
        loss_an_full(np.array([[0.5, 0.5, 0.5]]), np.array([[0.5, 0.5, 0.5]]), targets, 1.0)
