import numpy as np
import pytest
import torch

from heliocast.geodata import DEFAULT_CHANNELS, StationMeta, StationSeries, time_grid, parse_timestamp


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def make_series(n=96, name="alpha", start="2020-06-01T00:00", seed=0, channels=DEFAULT_CHANNELS):
    rng = np.random.default_rng(seed)
    meta = StationMeta(name, 45.0, 0.5, 120.0)
    values = rng.uniform(0.0, 900.0, size=(n, len(channels)))
    return StationSeries(meta, time_grid(parse_timestamp(start), n), values, tuple(channels))


@pytest.fixture
def series():
    return make_series()


@pytest.fixture(scope="session")
def tiny_world():
    from heliocast.synth import SynthConfig, generate

    cfg = SynthConfig(grid=8, days=4, blobs=2, blob_sigma=(1.5, 2.5), wind=(0.2, 0.0),
                      stations=[{"name": "a", "row": 2, "col": 3}, {"name": "b", "row": 5, "col": 4}])
    return generate(cfg)


@pytest.fixture(scope="session")
def tiny_prepared(tiny_world):
    from heliocast.pipeline import Designation, Prepared, RawDataset

    raw = RawDataset(tiny_world.stations, tiny_world.cube)
    return Prepared(raw, fit_on=Designation(("a",), (0, 3)), patch_size=4, flow_iterations=20)


# ------------------------------------------------ acceptance summary lines

_criteria: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    n, title = marker.args
    entry = _criteria.setdefault(n, [title, True])
    entry[1] = entry[1] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {title}")
