import io
import itertools
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from engine.ranging import (ApCalibration, RssSample, dump_calibrations, fit_all, fit_calibration,
                            load_calibrations, load_pairs, range_from_rss, read_rss_trace, write_rss_trace)
from services.errors import ContractError, ParseError, UnderdeterminedError, ValidationError


def _range(rss, alpha, beta):
    return range_from_rss(RssSample('ap-1', 0.0, rss), ApCalibration('ap-1', alpha, beta)).d


def test_range_examples():
    assert _range(0.0, 2.0, -0.05) == pytest.approx(2.0, rel=1e-15)
    assert _range(-73.0, 1.0, 0.0) == 1.0
    assert _range(-40.0, 0.5, -0.06) == pytest.approx(0.5 * math.exp(2.4), rel=1e-12)
    assert _range(-40.0, 0.5, -0.06) == pytest.approx(5.5116, abs=1e-4)


def test_alpha_must_be_positive():
    with pytest.raises(ValidationError):
        ApCalibration('ap-1', 0.0, -0.05)


def test_mismatched_calibration():
    with pytest.raises(ContractError):
        range_from_rss(RssSample('ap-2', 0.0, -50.0), ApCalibration('ap-1', 1.0, -0.05))


@given(st.floats(-100, 0), st.floats(-100, 0))
def test_range_monotone_in_rss(a, b):
    assume(abs(a - b) > 1e-6)
    lo, hi = min(a, b), max(a, b)
    assert _range(lo, 2.0, -0.05) > _range(hi, 2.0, -0.05)
    assert _range(lo, 2.0, 0.05) < _range(hi, 2.0, 0.05)


def _pairs(alpha, beta, rss_values):
    return [(r, alpha * math.exp(beta * r)) for r in rss_values]


def test_noiseless_fit_recovers_parameters():
    cal = fit_calibration(_pairs(2.0, -0.05, [-30, -50, -70]), 'ap-1')
    assert cal.alpha == pytest.approx(2.0, rel=1e-9)
    assert cal.beta == pytest.approx(-0.05, rel=1e-9)


def test_two_point_fit():
    cal = fit_calibration([(0.0, 1.0), (-20.0, math.e)], 'ap-1')
    assert cal.alpha == pytest.approx(1.0, rel=1e-12)
    assert cal.beta == pytest.approx(-0.05, rel=1e-12)


def test_noisy_fit_within_five_percent():
    rng = np.random.default_rng(11)
    d = rng.uniform(1.0, 25.0, 200)
    rss = np.log(d / 2.0) / -0.05 + rng.normal(0.0, 1.0, 200)
    cal = fit_calibration(list(zip(rss, d)), 'ap-1')
    assert cal.alpha == pytest.approx(2.0, rel=0.05)
    assert cal.beta == pytest.approx(-0.05, rel=0.05)


def test_fit_is_least_squares_in_log_distance():
    pairs = [(-35.0, 3.0), (-48.0, 6.5), (-61.0, 14.0), (-70.0, 19.0)]
    cal = fit_calibration(pairs, 'ap-1')

    def sse(alpha, beta):
        return sum((math.log(d) - math.log(alpha) - beta * r) ** 2 for r, d in pairs)

    best = sse(cal.alpha, cal.beta)
    for da, db in itertools.product(np.linspace(-0.05, 0.05, 11), np.linspace(-0.002, 0.002, 11)):
        assert sse(cal.alpha * (1 + da), cal.beta + db) >= best - 1e-12


def test_fit_needs_two_distinct_rss():
    with pytest.raises(UnderdeterminedError):
        fit_calibration([(-50.0, 3.0), (-50.0, 4.0)], 'ap-1')


def test_fit_rejects_non_positive_distance():
    with pytest.raises(ValidationError):
        fit_calibration([(-50.0, 0.0), (-60.0, 4.0)], 'ap-1')


def test_demo_pairs_fit_true_calibrations(demo_scenario):
    text = (Path(__file__).resolve().parent.parent / 'backend' / 'fixtures' / 'demo_calibration_pairs.json').read_text()
    fitted = {c.ap_id: c for c in fit_all(load_pairs(text))}
    for true in demo_scenario.true_calibrations:
        assert fitted[true.ap_id].alpha == pytest.approx(true.alpha, rel=1e-5)
        assert fitted[true.ap_id].beta == pytest.approx(true.beta, rel=1e-5)


def test_calibration_file_round_trip():
    cals = [ApCalibration('ap-1', 0.3, -0.06), ApCalibration('ap-2', 0.35, -0.058)]
    assert load_calibrations(dump_calibrations(cals)) == cals


def test_bad_pairs_file():
    with pytest.raises(ParseError):
        load_pairs('{"pairs": [{"ap_id": "ap-1"}]}')


def test_rss_trace_io():
    trace = [RssSample('ap-1', 1.0, -52.5), RssSample('ap-2', 1.0, -61.25)]
    buf = io.StringIO()
    write_rss_trace(trace, buf)
    assert read_rss_trace(buf.getvalue().splitlines()) == trace
    with pytest.raises(ParseError):
        read_rss_trace(['{"t": 1.0}'])
