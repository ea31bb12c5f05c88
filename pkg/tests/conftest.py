import time
from pathlib import Path

import numpy as np
import pytest

from camforge import cli

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """gen-data (n=600) -> train -> transform through the CLI, with wall-clock timings."""
    root = tmp_path_factory.mktemp("pipeline")
    corpus, ckpt, tte = root / "corpus", root / "tinynet.cgf", root / "tinynet_tte.cgf"
    timings = {}
    t0 = time.perf_counter()
    assert cli.main(["gen-data", "--out", str(corpus), "--n", "600", "--seed", "7"]) == 0
    timings["gen-data"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert cli.main(["train", "--corpus", str(corpus), "--out", str(ckpt), "--seed", "7"]) == 0
    timings["train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert cli.main(["transform", "--in", str(ckpt), "--out", str(tte),
                     "--report", str(root / "report.json")]) == 0
    timings["transform"] = time.perf_counter() - t0
    return {"root": root, "corpus": corpus, "model": ckpt, "tte": tte, "timings": timings}


@pytest.fixture
def criterion(request):
    """Record a one-line pass/fail verdict for an acceptance criterion."""
    state = {}

    def set_detail(label, detail=""):
        state["label"] = label
        state["detail"] = detail

    yield set_detail
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    ACCEPTANCE_LINES.append(
        f"[{'PASS' if ok else 'FAIL'}] {state.get('label', request.node.name)}"
        + (f" -- {state['detail']}" if state.get("detail") else ""))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
