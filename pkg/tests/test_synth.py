import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heliocast.errors import ConfigError
from heliocast.geodata import load_context_cube, load_station_series
from heliocast.solarphys import clear_sky
from heliocast.synth import SynthConfig, _blob_schedule, _cell_schedule, cloud_field, generate, label_audit, write_dataset

SMALL = dict(grid=16, days=3, cells=0, stations=[{"name": "a", "row": 3, "col": 4},
                                        {"name": "b", "row": 10, "col": 12}])


def small(**kw):
    return SynthConfig(**{**SMALL, **kw})


def test_zero_clouds_is_clear_sky():
    w = generate(small(blobs=0))
    for s in w.stations.values():
        cs = clear_sky(s.timestamps, s.meta, 3.0)
        np.testing.assert_allclose(s.channel("ghi"), cs.ghi, atol=1e-9, rtol=0)
        np.testing.assert_allclose(s.channel("dni"), cs.dni, atol=1e-9, rtol=0)
    assert np.all(w.cube.frames == 0)


def test_full_overcast_blocks_sun():
    w = generate(small(blobs=0, daily_overcast=[1.0]))
    for s in w.stations.values():
        assert np.all(s.channel("ghi") == 0)
        assert s.channel("cs_ghi").max() > 500


def test_wind_shifts_field_one_cell():
    cfg = small(blobs=3, wind=(1.0, 0.0), regeneration=0.0)
    blobs = _blob_schedule(cfg, np.random.default_rng(0), 20)
    for t in range(10, 15):
        a, b = cloud_field(cfg, blobs, t), cloud_field(cfg, blobs, t + 1)
        np.testing.assert_allclose(b, np.roll(a, 1, axis=1), atol=1e-12, rtol=0)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.4, 1.4), st.floats(-1.4, 1.4), st.integers(0, 1000))
def test_advection_conserves_mass(u, v, seed):
    cfg = small(blobs=4, wind=(u, v), regeneration=0.0, blob_sigma=(2.0, 3.0))
    blobs = _blob_schedule(cfg, np.random.default_rng(seed), 30)
    mass = [cloud_field(cfg, blobs, t).sum() for t in range(0, 30, 3)]
    assert max(mass) - min(mass) <= 1e-9 * max(1.0, mass[0])


def test_cells_are_short_lived():
    cfg = small(blobs=0, cells=6, cell_life=4.0, days=6)
    table = _cell_schedule(cfg, np.random.default_rng(0), 6 * 48)
    life = table[:, 5] - table[:, 4]
    assert life.min() >= 2.0 - 1e-9 and 2.0 < life.mean() < 8.0
    field = np.stack([cloud_field(cfg, np.zeros((0, 6)), t, table) for t in range(6 * 48)])
    assert field.max() > 0.1
    # a day apart the cell fields are unrelated
    a, b = field[:-48].ravel(), field[48:].ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.2


def test_ghi_never_exceeds_clear_sky():
    w = generate(small(blobs=8, cells=10))
    for s in w.stations.values():
        assert np.all(s.channel("ghi") <= s.channel("cs_ghi") + 1e-12)
        assert np.all(s.channel("ghi") >= 0)


def test_station_sees_its_cell():
    w = generate(small(blobs=5))
    s = w.stations["b"]
    tau = 1.0 - w.cube.frames[:, 0, 10, 12].astype(np.float64)
    day = s.channel("cs_ghi") > 0
    np.testing.assert_allclose(s.channel("kt")[day], tau[day], atol=1e-6)


def test_same_seed_bitwise(tmp_path):
    def digest(d):
        h = hashlib.sha256()
        for p in sorted(d.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(d).as_posix().encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    write_dataset(generate(small(seed=4)), tmp_path / "a")
    write_dataset(generate(small(seed=4)), tmp_path / "b")
    write_dataset(generate(small(seed=5)), tmp_path / "c")
    assert digest(tmp_path / "a") == digest(tmp_path / "b") != digest(tmp_path / "c")


def test_written_dataset_round_trips(tmp_path):
    w = generate(small())
    write_dataset(w, tmp_path)
    s = load_station_series(tmp_path / "stations" / "a.csv")
    np.testing.assert_allclose(s.values, w.stations["a"].values, rtol=1e-9, atol=1e-9)
    cube = load_context_cube(tmp_path / "context")
    assert np.array_equal(cube.frames, w.cube.frames)
    index = json.loads((tmp_path / "dataset.json").read_text())
    assert index["stations"] == ["a", "b"]
    assert SynthConfig.from_dict(index["synth"]) == w.cfg


@pytest.mark.parametrize("kw", [
    {"stations": [{"name": "x", "row": 16, "col": 0}]},
    {"stations": [{"name": "x", "row": 0, "col": -1}]},
    {"stations": [{"name": "x", "row": 1, "col": 1}, {"name": "x", "row": 2, "col": 2}]},
    {"opacity": (0.5, 1.2)},
    {"wind": (2.0, 0.0)},
    {"turbidity": 0.5},
    {"daily_overcast": [1.5]},
    {"cell_opacity": (-0.1, 0.5)},
    {"cells": -1},
    {"cell_life": 1.0},
])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        small(**kw)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"clouds": 3})


def test_audit_cloud_free_all_easy():
    counts = label_audit(generate(small(blobs=0, days=5)))
    assert counts["Hard"] == 0 and counts["Easy"] == counts["All"] == 2 * 4


def test_audit_alternating_overcast_hard():
    counts = label_audit(generate(small(blobs=0, days=8, daily_overcast=[0.0, 0.9])))
    assert counts["Hard"] >= 0.4 * counts["All"]
    assert counts["Easy"] + counts["Hard"] == counts["All"]


def test_default_world_has_both_splits():
    cfg = SynthConfig()
    assert cfg.grid == 32 and cfg.days >= 20 and len(cfg.stations) == 4
    counts = label_audit(generate(cfg))
    assert counts["Easy"] > 0 and counts["Hard"] > 0
    assert counts["All"] == 4 * (cfg.days - 1)
