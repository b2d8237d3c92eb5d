import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unetdr.losses import MetricsReport, bce_loss, combined_loss, dice_loss, evaluate_metrics
from unetdr.tensor import Tensor


def test_dice_hand_enumeration():
    # fg ratio 1/3, bg ratio 2/5
    loss = dice_loss(np.array([1.0, 1, 0, 0]), Tensor([1.0, 0, 0, 0]))
    assert abs(float(loss.data) - 4 / 15) <= 1e-9


def test_dice_perfect_prediction_is_zero():
    y = (np.random.default_rng(0).random((4, 4, 4)) < 0.3).astype(float)
    assert abs(float(dice_loss(y, Tensor(y)).data)) < 1e-9


def test_dice_all_wrong_is_one():
    assert float(dice_loss(np.ones(8), Tensor(np.zeros(8))).data) == pytest.approx(1.0, abs=1e-9)


def test_dice_rejects_out_of_range():
    with pytest.raises(ValueError):
        dice_loss(np.ones(2), Tensor([0.5, 1.5]))


def test_bce_fixture():
    loss = bce_loss(np.array([1.0, 0.0]), Tensor([0.9, 0.2]))
    assert abs(float(loss.data) - 0.16425) <= 1e-5
    assert float(loss.data) == pytest.approx((-np.log(0.9) - np.log(0.8)) / 2, rel=1e-14)


def test_bce_clamps_hard_zero():
    loss = float(bce_loss(np.array([1.0]), Tensor([0.0])).data)
    assert loss == pytest.approx(-np.log(1e-7), rel=1e-9)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        bce_loss(np.zeros(3), Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="shape"):
        dice_loss(np.zeros(3), Tensor(np.zeros(4)))


def test_combined_perfect_prediction():
    y = np.zeros((4, 4, 4))
    y[1:3, 1:3, 1:3] = 1
    lv = combined_loss(y, Tensor(y))
    assert float(lv.total.data) < 1e-5
    assert lv.dice_term + lv.bce_term == pytest.approx(float(lv.total.data))


def test_metric_fixture():
    y = np.zeros(27)
    p = np.zeros(27)
    y[[0, 1, 2, 3]] = 1
    p[[2, 3, 4, 5]] = 1
    assert evaluate_metrics(y.reshape(3, 3, 3), p.reshape(3, 3, 3)) == (0.5, 1 / 3, 23 / 27)


def test_metrics_empty_vs_empty():
    z = np.zeros((2, 2, 2))
    assert evaluate_metrics(z, z) == (1.0, 1.0, 1.0)


def test_metrics_empty_vs_nonempty():
    z = np.zeros((2, 2, 2))
    o = z.copy()
    o[0, 0, 0] = 1
    assert evaluate_metrics(z, o)[:2] == (0.0, 0.0)


def test_threshold_is_inclusive():
    assert evaluate_metrics(np.ones(1), np.array([0.5]))[0] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_jaccard_dice_identity(seed, frac):
    rng = np.random.default_rng(seed)
    y = rng.random((6, 6, 6)) < frac
    p = rng.random((6, 6, 6))
    d, j, a = evaluate_metrics(y, p)
    assert abs(j - d / (2 - d)) <= 1e-12
    assert 0 <= d <= 1 and 0 <= j <= 1 and 0 <= a <= 1


def test_report_round_trip():
    rng = np.random.default_rng(4)
    rep = MetricsReport()
    for k in range(3):
        rep.add(f"c{k}", rng.random((4, 4, 4)) < 0.3, rng.random((4, 4, 4)))
    back = MetricsReport.from_text(rep.to_text())
    assert back.per_case == rep.per_case
    assert back.aggregate == rep.aggregate
    assert rep.to_text().splitlines()[-1].startswith("mean\t")


def test_report_bad_header():
    with pytest.raises(ValueError):
        MetricsReport.from_text("a\tb\n")
