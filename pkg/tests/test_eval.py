import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_series
from heliocast.errors import ParameterError, ShapeError, ValidationError
from heliocast.evaluation import (
    AREA_FLOOR, HARD_THRESHOLD, EvalReport, Forecast, SplitMetrics, clear_sky_baseline,
    clear_sky_forecaster, evaluate, format_table, fourier_baseline, fourier_forecaster,
    interval_coverage, metrics, persistence, persistence_forecaster, split_label,
    write_forecast_csv,
)
from heliocast.geodata import StationSeries, make_windows, time_grid, parse_timestamp
from heliocast.solarphys import clear_sky

day = arrays(np.float64, 48, elements=st.floats(0, 1200))


def bell(scale=1.0):
    t = np.arange(48)
    return scale * np.maximum(0.0, np.sin(np.pi * (t - 12) / 24)) * 800.0


def brute_label(y, y_prev):
    def area(v):
        return sum((v[i] + v[i + 1]) * 0.25 for i in range(len(v) - 1))
    r = abs(math.log(max(area(y), 1.0)) - math.log(max(area(y_prev), 1.0)))
    return r, "Easy" if r < abs(math.log(2 / 3)) else "Hard"


# ------------------------------------------------------------------- split

def test_threshold_constant():
    assert HARD_THRESHOLD == pytest.approx(0.405465, abs=1e-6)
    assert abs(HARD_THRESHOLD - abs(math.log(2 / 3))) < 1e-9
    assert AREA_FLOOR == 1.0


def test_split_examples():
    assert split_label(bell(), bell()).label == "Easy"
    lab = split_label(bell(2.0), bell())
    assert lab.r == pytest.approx(math.log(2)) and lab.hard
    lab = split_label(bell(1.4), bell())
    assert lab.r == pytest.approx(math.log(1.4)) and lab.label == "Easy"


def test_split_dark_days_easy():
    lab = split_label(np.zeros(48), np.zeros(48))
    assert lab.r == 0 and lab.label == "Easy"


def test_split_shape_mismatch():
    with pytest.raises(ShapeError):
        split_label(np.zeros(48), np.zeros(47))


@given(day, day)
def test_split_symmetric_and_brute_force(a, b):
    assert split_label(a, b).r == split_label(b, a).r
    r, label = brute_label(a, b)
    got = split_label(a, b)
    assert got.label == label
    assert got.r == pytest.approx(r, abs=1e-9)


@given(arrays(np.float64, 48, elements=st.floats(1, 1200)),
       arrays(np.float64, 48, elements=st.floats(1, 1200)), st.floats(0.5, 4.0))
def test_split_scale_invariant(a, b, c):
    assert split_label(c * a, c * b).r == pytest.approx(split_label(a, b).r, abs=1e-9)


def test_split_matches_brute_force_bulk():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        a = rng.uniform(0, 900, 48) * rng.uniform(0, 1)
        b = rng.uniform(0, 900, 48) * rng.uniform(0, 1)
        assert split_label(a, b).label == brute_label(a, b)[1]


# ----------------------------------------------------------------- metrics

def test_metric_examples():
    t = np.linspace(0, 100, 48)
    assert metrics(t, t) == (0.0, 0.0)
    assert metrics(t + 10, t) == pytest.approx((10.0, 10.0))
    err = np.tile([0.0, 10.0], 24)
    mae, rmse = metrics(t + err, t)
    assert mae == pytest.approx(5.0) and rmse == pytest.approx(math.sqrt(50))


def test_metric_errors():
    with pytest.raises(ShapeError):
        metrics(np.zeros(3), np.zeros(4))
    with pytest.raises(ValidationError):
        metrics(np.array([np.nan]), np.zeros(1))


@given(day, day)
def test_mae_below_rmse(p, t):
    mae, rmse = metrics(p, t)
    assert mae <= rmse + 1e-9


def test_coverage_cases():
    lv = [0.02, 0.5, 0.98]
    t = np.linspace(0, 1, 48)
    inside = np.stack([t - 1, t, t + 1], -1)
    assert interval_coverage(inside, t, lv) == 1.0
    outside = np.stack([t + 1, t + 2, t + 3], -1)
    assert interval_coverage(outside, t, lv) == 0.0
    half = inside.copy()
    half[::2] += 5
    assert interval_coverage(half, t, lv) == 0.5


def test_coverage_missing_level():
    with pytest.raises(ParameterError):
        interval_coverage(np.zeros((4, 2)), np.zeros(4), [0.1, 0.9])


@given(arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), arrays(np.float64, 5, elements=st.floats(-5, 5)))
def test_coverage_in_unit_interval(fan, t):
    p = interval_coverage(np.sort(fan, -1), t, [0.02, 0.5, 0.98])
    assert 0.0 <= p <= 1.0


# --------------------------------------------------------------- baselines

def test_persistence_copies():
    h = bell()
    out = persistence(h)
    assert np.array_equal(out, h) and out is not h
    assert np.all(persistence(np.zeros(48)) == 0)


def test_persistence_doubled_day_brute_force():
    y_prev, y = bell(), bell(2.0)
    mae, _ = metrics(persistence(y_prev), y)
    assert mae == pytest.approx(sum(abs(a - b) for a, b in zip(y, y_prev)) / 48)


def dft_oracle(x, k):
    n = len(x)
    coef = [sum(x[t] * complex(math.cos(2 * math.pi * f * t / n), -math.sin(2 * math.pi * f * t / n))
                for t in range(n)) for f in range(n)]
    keep = [f for f in range(n) if f < k or n - f < k]
    return np.array([sum(coef[f] * complex(math.cos(2 * math.pi * f * t / n),
                                           math.sin(2 * math.pi * f * t / n)) for f in keep).real / n
                     for t in range(n)])


@pytest.mark.parametrize("k", [1, 3, 4, 5, 24])
def test_fourier_matches_dft_oracle(k):
    x = np.random.default_rng(k).uniform(0, 900, 48)
    np.testing.assert_allclose(fourier_baseline(x, k), dft_oracle(x, k), atol=1e-10, rtol=0)


def test_fourier_exact_cases():
    np.testing.assert_allclose(fourier_baseline(np.full(48, 7.0), 1), 7.0, atol=1e-12)
    s = 3 + np.sin(2 * np.pi * np.arange(48) / 48)
    np.testing.assert_allclose(fourier_baseline(s, 2), s, atol=1e-10)


def test_fourier_mode_range():
    for k in (0, 25):
        with pytest.raises(ParameterError):
            fourier_baseline(np.zeros(48), k)


@given(day, st.integers(1, 24))
def test_fourier_idempotent_and_energy(x, k):
    once = fourier_baseline(x, k)
    np.testing.assert_allclose(fourier_baseline(once, k), once, atol=1e-9 * max(1, x.max()))
    assert np.sum(np.abs(np.fft.rfft(once)) ** 2) <= np.sum(np.abs(np.fft.rfft(x)) ** 2) * (1 + 1e-12)


def test_clear_sky_baseline_equals_model(series):
    t = time_grid(parse_timestamp("2020-06-01T00:00"), 48)
    out = clear_sky_baseline(t, series.meta)
    np.testing.assert_allclose(out, clear_sky(t, series.meta).ghi, atol=1e-12, rtol=0)
    winter = time_grid(parse_timestamp("2020-12-21T20:00"), 16)
    assert np.all(clear_sky_baseline(winter, series.meta) == 0)


# -------------------------------------------------------------- evaluation

def periodic_series(days=4, scales=None):
    scales = scales or [1.0] * days
    ghi = np.concatenate([bell(s) for s in scales])
    s = make_series(n=48 * days)
    values = s.values.copy()
    values[:, 0] = ghi
    return StationSeries(s.meta, s.timestamps, values, s.channels)


def test_persistence_on_identical_days():
    samples = list(make_windows(periodic_series(), None, stride=48))
    rep, _ = evaluate(persistence_forecaster(), samples, "Persistence")
    assert rep.splits["All"].count == rep.splits["Easy"].count == 3
    assert rep.splits["Hard"].count == 0 and rep.splits["Hard"].mae is None
    assert rep.splits["All"].mae == 0.0 and rep.splits["All"].rmse == 0.0


def test_evaluate_persistence_brute_force(series):
    samples = list(make_windows(make_series(n=48 * 5, seed=3), None, stride=12))
    rep, _ = evaluate(persistence_forecaster(), samples)
    for split in ("All", "Easy", "Hard"):
        errs = []
        for s in samples:
            y, h = s.target[:, 0], s.history_series[:, 0]
            if split != "All" and brute_label(y, h)[1] != split:
                continue
            errs.extend(y - h)
        m = rep.splits[split]
        assert m.count == (len(samples) if split == "All" else
                           sum(brute_label(s.target[:, 0], s.history_series[:, 0])[1] == split
                               for s in samples))
        if errs:
            assert m.mae == pytest.approx(np.mean(np.abs(errs)), abs=1e-9)
            assert m.rmse == pytest.approx(np.sqrt(np.mean(np.square(errs))), abs=1e-9)


def test_evaluate_split_from_ground_truth_only():
    samples = list(make_windows(periodic_series(scales=[1, 2, 1, 1]), None, stride=48))
    a, _ = evaluate(persistence_forecaster(), samples)
    b, _ = evaluate(clear_sky_forecaster(), samples)
    assert [a.splits[k].count for k in a.splits] == [b.splits[k].count for k in b.splits]
    assert a.splits["Hard"].count == 2


def test_evaluate_partition_and_pooling():
    samples = list(make_windows(make_series(n=48 * 4, seed=5), None, stride=6))
    for pooling in ("timesteps", "windows"):
        rep, _ = evaluate(fourier_forecaster(3), samples, pooling=pooling)
        s = rep.splits
        assert s["All"].count == s["Easy"].count + s["Hard"].count
    with pytest.raises(ParameterError):
        evaluate(fourier_forecaster(3), samples, pooling="days")


def test_evaluate_daylight_only_drops_night():
    samples = list(make_windows(periodic_series(), None, stride=48))
    fc = Forecast(np.stack([s.target for s in samples]) + 50.0)
    full, _ = evaluate(None, samples, forecast=fc)
    day_only, _ = evaluate(None, samples, forecast=fc, daylight_only=True)
    assert full.splits["All"].mae == pytest.approx(50.0)
    assert day_only.splits["All"].mae == pytest.approx(50.0)
    assert day_only.options["daylight_only"] is True


def test_evaluate_quantile_fan_reports_coverage():
    samples = list(make_windows(periodic_series(), None, stride=48))
    t = np.stack([s.target for s in samples])
    lv = [0.02, 0.5, 0.98]
    fan = np.concatenate([t - 1, t, t + 1], axis=-1)
    rep, _ = evaluate(None, samples, forecast=Forecast(fan, lv))
    assert rep.splits["All"].p_t == 1.0 and rep.splits["All"].mae == 0.0


def test_report_invariants_enforced():
    ok = {"All": SplitMetrics(2, 1.0, 2.0), "Easy": SplitMetrics(1, 1.0, 2.0),
          "Hard": SplitMetrics(1, 1.0, 2.0)}
    EvalReport("m", ok)
    with pytest.raises(ValidationError):
        EvalReport("m", dict(ok, All=SplitMetrics(3, 1.0, 2.0)))
    with pytest.raises(ValidationError):
        EvalReport("m", dict(ok, Easy=SplitMetrics(1, 3.0, 2.0)))
    with pytest.raises(ValidationError):
        EvalReport("m", dict(ok, Hard=SplitMetrics(1, 1.0, 2.0, p_t=1.2)))


def test_report_table_layout(tmp_path):
    samples = list(make_windows(periodic_series(scales=[1, 2, 1, 1]), None, stride=48))
    a, _ = evaluate(persistence_forecaster(), samples, "Persistence")
    b, _ = evaluate(fourier_forecaster(4), samples, "Fourier4")
    table = format_table([a, b])
    lines = table.splitlines()
    assert "All (3)" in lines[0] and "Easy (1)" in lines[0] and "Hard (2)" in lines[0]
    assert lines[1].replace("|", " ").split() == ["MAE", "RMSE"] * 3
    assert lines[3].startswith("Persistence") and lines[4].startswith("Fourier4")
    a.save(tmp_path / "r.json")
    back = EvalReport.from_json(__import__("json").loads((tmp_path / "r.json").read_text()))
    assert back.to_json() == a.to_json()


def test_table_with_coverage_rows():
    samples = list(make_windows(periodic_series(), None, stride=48))
    t = np.stack([s.target for s in samples])
    rep, _ = evaluate(None, samples, "MQ", forecast=Forecast(np.concatenate([t, t, t], -1),
                                                             [0.02, 0.5, 0.98]))
    table = rep.table()
    assert "p_t" in table and "1.00" in table


def test_forecast_csv_columns(tmp_path):
    samples = list(make_windows(periodic_series(3), None, stride=48))
    t = np.stack([s.target for s in samples])
    write_forecast_csv(tmp_path / "p.csv", samples, Forecast(t))
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "window,station,timestamp,target,pred"
    write_forecast_csv(tmp_path / "q.csv", samples, Forecast(np.concatenate([t, t], -1), [0.02, 0.98]))
    head = (tmp_path / "q.csv").read_text().splitlines()
    assert head[0].endswith("q02,q98") and len(head) == 1 + 48 * len(samples)
