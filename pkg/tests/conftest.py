import os
from pathlib import Path

import numpy as np
import pytest

from mplexattn.graph import MultiplexGraph

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("MPLEXATTN_DATA", ROOT / "data"))


def dataset_path(name: str) -> Path | None:
    for candidate in (DATA_DIR / name,):
        if candidate.exists():
            return candidate
    return None


CS_AARHUS = dataset_path("cs_aarhus.mpx")
VICKERS = dataset_path("vickers.edges")

needs_cs_aarhus = pytest.mark.skipif(CS_AARHUS is None, reason="data/cs_aarhus.mpx missing; run scripts/fetch_datasets.py")


def random_multiplex(rng: np.random.Generator, n_nodes: int, n_layers: int, density: float = 0.3) -> MultiplexGraph:
    layers = []
    for _ in range(n_layers):
        edges = [(u, v) for u in range(n_nodes) for v in range(u + 1, n_nodes) if rng.random() < density]
        layers.append(edges)
    return MultiplexGraph.from_edges(n_nodes, layers)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_graph():
    # L0: a-b, b-c ; L1: a-b, c-d ; L2: triangle b-c-d
    return MultiplexGraph.from_edges(4, [[(0, 1), (1, 2)], [(0, 1), (2, 3)], [(1, 2), (2, 3), (1, 3)]],
                                     layer_names=["L0", "L1", "L2"])


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion, built from `criterion` markers

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "tests": {}})
    status = "passed" if report.passed else "skipped" if report.skipped else "failed"
    previous = entry["tests"].get(item.name)
    if previous is None or previous[0] == "passed":
        entry["tests"][item.name] = (status, [v for k, v in report.user_properties if k == "measured"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        statuses = [s for s, _ in entry["tests"].values()]
        verdict = "FAIL" if "failed" in statuses else "SKIP" if "skipped" in statuses else "PASS"
        tr.write_line(f"criterion {number}: {verdict}  {entry['title']}")
        for name, (status, measured) in entry["tests"].items():
            detail = "; ".join(measured)
            tr.write_line(f"    [{status}] {name}" + (f": {detail}" if detail else ""))
