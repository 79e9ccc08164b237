"""Shared fixtures and the per-criterion PASS/FAIL summary for the acceptance suite."""
import time

import pytest

_RESULTS = {}


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    num, title = crit
    entry = _RESULTS.setdefault(num, {"title": title, "ok": True, "detail": ""})
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
    if report.when == "call":
        entry["detail"] = dict(report.user_properties).get("detail", "")


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", tuple(mark.args))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        r = _RESULTS[num]
        line = f"criterion {num:2d} {'PASS' if r['ok'] else 'FAIL'}  {r['title']}"
        if r["detail"]:
            line += f"  [{r['detail']}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Two full desk-scale pipeline runs, the second rebuilt from the first run's manifest."""
    from tilegan.config import RunConfig, run_config_from_dict
    from tilegan.pipeline import run_desk_pipeline

    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    first = run_desk_pipeline(RunConfig(), root / "a")
    t1 = time.perf_counter()
    second = run_desk_pipeline(run_config_from_dict(first.manifest["config"]), root / "b")
    t2 = time.perf_counter()
    return first, second, (t1 - t0, t2 - t1)
