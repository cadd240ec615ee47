import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualct.metrics import (
    METRIC_COLUMNS,
    EvalResult,
    UndefinedMetricError,
    binarize_chi,
    dice,
    evaluate,
    format_metrics_table,
    rel_l2,
)

# magnitudes below ~1e-150 square to zero and make the norm undefined
vectors = st.lists(st.floats(-1e3, 1e3, allow_nan=False).filter(lambda x: x == 0 or abs(x) > 1e-100),
                   min_size=1, max_size=30)


def test_rel_l2_examples():
    t = np.array([1.0, -2.0, 3.0])
    assert rel_l2(t, t) == 0.0
    assert rel_l2(np.zeros(3), t) == 1.0
    assert rel_l2(2 * t, t) == 1.0
    assert rel_l2([2.0, -2.0, 3.0], t) == pytest.approx(1.0 / 14.0, rel=1e-15)


def test_rel_l2_errors():
    with pytest.raises(UndefinedMetricError):
        rel_l2([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        rel_l2([1.0], [1.0, 2.0])


@given(vectors, st.floats(-5, 5))
def test_rel_l2_scale_law(t, k):
    t = np.asarray(t)
    if not np.any(t):
        return
    assert rel_l2(k * t, t) == pytest.approx((k - 1.0) ** 2, rel=1e-9, abs=1e-12)


def test_dice_examples():
    a = np.zeros(400, dtype=bool)
    b = np.zeros(400, dtype=bool)
    a[:100] = True
    b[50:150] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(4), np.zeros(4)) == 1.0
    with pytest.raises(ValueError):
        dice(np.ones(3), np.ones(4))


def set_dice(a, b):
    """Dice from explicit index sets."""
    sa = {i for i, v in enumerate(a) if v}
    sb = {i for i, v in enumerate(b) if v}
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def test_dice_exhaustive_3x3():
    masks = [np.array(bits, dtype=bool) for bits in itertools.product((0, 1), repeat=9)]
    for a in masks:
        for b in masks:
            assert dice(a, b) == set_dice(a, b)


@given(st.lists(st.booleans(), min_size=1, max_size=40), st.data())
def test_dice_symmetric_and_bounded(a, data):
    b = data.draw(st.lists(st.booleans(), min_size=len(a), max_size=len(a)))
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


def test_binarize_examples():
    assert binarize_chi(np.ones(5)).all()
    assert not binarize_chi(np.zeros(5)).any()
    np.testing.assert_array_equal(binarize_chi([0.2, 0.5, 0.7]), [False, True, True])
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            binarize_chi([0.5], bad)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
@settings(max_examples=50)
def test_binarize_monotone(chi, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    assert np.all(binarize_chi(chi, hi) <= binarize_chi(chi, lo))


def test_evaluate_and_table():
    c = np.array([1.0, 2.0, 3.0, 4.0])
    p = np.array([10.0, 0.0, 0.0, 10.0])
    mask = np.array([1, 1, 0, 0], dtype=bool)
    r = evaluate(c, 2 * p, mask, c, p, mask)
    assert r == EvalResult(0.0, 1.0, 1.0, 2)
    null = evaluate(c, p, np.zeros(4), c, p, np.zeros(4))
    assert null.dice is None and null.chi_pixels == 0
    lines = format_metrics_table([("proposed", r), ("null", null)]).splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[1] == "proposed,0.0,1.0,1.0"
    assert lines[2] == "null,0.0,0.0,"


def test_eval_result_invariants():
    with pytest.raises(ValueError):
        EvalResult(-1.0, 0.0, None)
    with pytest.raises(ValueError):
        EvalResult(0.0, 0.0, 1.5)
