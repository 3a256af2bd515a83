import copy
import json

import pytest

CANONICAL = {
    "flow": {"A_inf": [[-1.0, 0.0], [0.0, -1.0]], "M": [[0.0, 1.0], [1.0, 0.0]], "a": 0.5, "b": 1.0},
    "perturbation": {"kind": "entrywise-ou", "sigma": 0.3},
    "diffusion": {"B0": [[1.0, 0.0], [0.0, 1.0]]},
    "simulation": {"horizon": 2.0, "num_traj": 200},
    "hypothesis": {
        "mode": "declared",
        "c": {"1": 0.384, "2": 0.407, "4": 0.452, "8": 0.5},
        "d1": 1.5,
        "d2": 0.058,
    },
    "certification": {"samples": 200, "n_list": [2], "t_list": [2.0, 3.0, 4.0]},
}


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


@pytest.fixture
def write_config(tmp_path):
    """Write ``CANONICAL`` merged with overrides as JSON and return its path."""
    counter = iter(range(10**6))

    def make(extra: dict | None = None, base: dict = CANONICAL) -> str:
        path = tmp_path / f"cfg{next(counter)}.json"
        path.write_text(json.dumps(merge(base, extra or {})))
        return str(path)

    return make


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, label): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, label = mark.args
    entry = _CRITERIA.setdefault(number, [label, None])
    if rep.failed:
        entry[1] = "FAIL"
    elif rep.when == "call" and entry[1] is None:
        entry[1] = "PASS" if rep.passed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        label, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status or 'NOT RUN'}  {label}")
