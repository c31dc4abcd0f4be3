from __future__ import annotations

from pathlib import Path

import pytest

from hopforge.kg import load_triples
from hopforge.logical import to_logical_path
from hopforge.subgraphs import Subgraph

DATA = Path(__file__).parent / "data"

DUB = "/film/dubbing_performance/film"
EPISODE = "/tv/special_tv_performance_type/episode_performances"
SPECIAL = "/film/performance/special_performance_type"
BATMAN = "Batman:_Gotham_Knight"


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): exit criterion number n")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = marker.args[0]
    results = item.config._acceptance
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = results.get(n, "PASS")
        state = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if prev == "FAIL" or state == "FAIL":
            results[n] = "FAIL"
        elif prev == "SKIP" or state == "SKIP":
            results[n] = "SKIP" if state == "SKIP" else prev
        else:
            results[n] = "PASS"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(f"criterion {n}: {results[n]}")


@pytest.fixture(scope="session")
def dubbing_kg():
    return load_triples(DATA / "batman_dubbing.tsv")


@pytest.fixture(scope="session")
def voices_kg():
    return load_triples(DATA / "batman_voices.tsv")


@pytest.fixture(scope="session")
def extended_kg():
    """The voices graph plus two dubbing facts that make ``#1`` an answerable target."""
    return load_triples(DATA / "batman_voices_extended.tsv")


@pytest.fixture(scope="session")
def voices_subgraph(voices_kg):
    return Subgraph(BATMAN, voices_kg.triples, (DUB, EPISODE, SPECIAL))


@pytest.fixture(scope="session")
def voices_path(voices_subgraph):
    return to_logical_path(voices_subgraph)
