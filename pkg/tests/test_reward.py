import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lensforge.data import ConfigError, FormatError, PairSet
from lensforge.numkit import Rng, ShapeError, finite_diff_check
from lensforge.reward import (
    RewardHead, RewardTrainConfig, bt_loss, estimation_error, load_head, mean_bt_loss, pair_accuracy,
    save_head, train_reward,
)

from conftest import random_pairs


def linear_head(w, bias=0.0):
    """A one-unit head computing relu(w . e) + bias, linear on the positive half-space."""
    w = np.asarray(w, dtype=float)
    return RewardHead(w[:, None], np.zeros(1), np.ones(1), np.array(bias))


def test_equal_rewards_give_log_two():
    head = linear_head([1.0, 0.0])
    loss, _ = bt_loss(head, [1.0, 0.0], [1.0, 0.0])
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_margin_log_three():
    head = linear_head([1.0])
    loss, _ = bt_loss(head, [math.log(3)], [0.0])
    assert loss == pytest.approx(math.log(4 / 3), abs=1e-12)
    assert loss == pytest.approx(0.2877, abs=1e-4)


@pytest.mark.parametrize("margin", [40.0, -40.0, 800.0, -800.0])
def test_large_margins_stay_finite(margin):
    head = linear_head([1.0])
    ep, em = ([margin], [0.0]) if margin > 0 else ([0.0], [-margin])
    loss, grads = bt_loss(head, ep, em)
    want = math.log1p(math.exp(-abs(margin))) if margin > 0 else abs(margin)
    assert loss == pytest.approx(want, rel=1e-12, abs=1e-300)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_bt_gradient_finite_difference():
    rng = Rng(4)
    head = RewardHead.init(5, rng, hidden=7)
    pairs = random_pairs(1, n=9, d=5)
    _, grads = bt_loss(head, pairs.e_plus, pairs.e_minus)
    flat = np.concatenate([np.ravel(grads[k]) for k in ("b1", "b2", "w1", "w2")])
    err = finite_diff_check(lambda v: bt_loss(head.with_vector(v), pairs.e_plus, pairs.e_minus)[0], head.vector(), flat)
    assert err < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(-100, 100))
def test_loss_invariant_to_output_bias(seed, shift):
    head = RewardHead.init(4, Rng(seed), hidden=6)
    pairs = random_pairs(seed % 1000, n=8, d=4)
    moved = head.copy()
    moved.b2 = moved.b2 + shift
    assert bt_loss(moved, pairs.e_plus, pairs.e_minus)[0] == pytest.approx(bt_loss(head, pairs.e_plus, pairs.e_minus)[0], abs=1e-12)


def test_bt_shape_errors():
    head = RewardHead.init(3, Rng(0), hidden=4)
    with pytest.raises(ShapeError):
        bt_loss(head, np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        head(np.zeros(4))


def separable_pairs(n, d, seed, data_seed=None):
    rng = Rng(seed)
    w = rng.normal(d)
    if data_seed is not None:
        rng = Rng(data_seed)
    a, b = rng.normal_like((n, d)), rng.normal_like((n, d))
    swap = (a @ w) < (b @ w)
    ep = np.where(swap[:, None], b, a)
    em = np.where(swap[:, None], a, b)
    return PairSet(np.arange(n), ep, em), w


def test_learns_linear_gold():
    train, _ = separable_pairs(2000, 8, 0)
    test, _ = separable_pairs(500, 8, 0, data_seed=99)
    head, hist = train_reward(train, RewardTrainConfig(lr=1e-2, max_epochs=30, patience=5, hidden=32))
    assert pair_accuracy(head, train) > 0.95
    assert pair_accuracy(head, test) > 0.9
    assert hist.val_loss[hist.best_epoch] == min(hist.val_loss)


def test_training_is_deterministic():
    pairs = random_pairs(3, n=60, d=4)
    cfg = RewardTrainConfig(lr=1e-3, max_epochs=5, hidden=8, seed=2)
    h1, hist1 = train_reward(pairs, cfg)
    h2, hist2 = train_reward(pairs, cfg)
    assert np.array_equal(h1.vector(), h2.vector())
    assert hist1.train_loss == hist2.train_loss and hist1.val_loss == hist2.val_loss


def test_patience_one_stops_on_unlearnable_pairs():
    # identical embeddings on both sides: validation loss is ln 2 forever
    e = Rng(0).normal_like((20, 3))
    pairs = PairSet(np.arange(20), e, e.copy())
    _, hist = train_reward(pairs, RewardTrainConfig(lr=1e-2, max_epochs=10, patience=1, hidden=4))
    assert hist.stopped_early and len(hist.val_loss) == 1
    assert hist.val_loss[0] == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("field,value", [
    ("max_epochs", 0), ("patience", 0), ("patience", 99), ("validation_fraction", 1.0), ("batch", 0), ("lr", 0.0),
])
def test_train_config_errors(field, value):
    with pytest.raises(ConfigError, match=field):
        RewardTrainConfig(**{field: value}).validate()


def test_estimation_error_reference():
    test, w = separable_pairs(300, 6, 5)
    gold = linear_head(w)
    assert estimation_error(gold, test, gold) == 0.0
    assert estimation_error(RewardHead.init(6, Rng(1), hidden=8), test, gold) != 0.0
    with pytest.raises(ValueError):
        estimation_error(gold, test.subset(np.arange(0)), gold)


def test_mean_bt_loss_matches_bt_loss():
    head = RewardHead.init(4, Rng(2), hidden=5)
    pairs = random_pairs(2, n=11, d=4)
    assert mean_bt_loss(head, pairs) == pytest.approx(bt_loss(head, pairs.e_plus, pairs.e_minus)[0], abs=1e-12)


def test_save_load_round_trip(tmp_path):
    head = RewardHead.init(5, Rng(3), hidden=7)
    save_head(head, tmp_path / "rm", {"seed": 3})
    back = load_head(tmp_path / "rm")
    np.testing.assert_allclose(back.vector(), head.vector(), rtol=1e-6, atol=1e-7)
    (tmp_path / "rm.bin").write_bytes(b"\0" * 8)
    with pytest.raises(FormatError):
        load_head(tmp_path / "rm")
