from __future__ import annotations

import os
from pathlib import Path

import pytest

from rffguard import harness
from rffguard.config import ExperimentConfig

# filled by test_acceptance; echoed in the terminal summary
CRITERIA: list[tuple[str, bool, str]] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    CRITERIA.append((criterion, ok, detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")


def _run_root(tmp_path_factory) -> Path:
    # RFFGUARD_ACCEPTANCE_DIR keeps the desk runs (and their stage caches) between sessions
    root = os.environ.get("RFFGUARD_ACCEPTANCE_DIR")
    return Path(root) if root else tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The default desk experiment: (config, output dir, MetricsBundle)."""
    cfg = ExperimentConfig()
    out = _run_root(tmp_path_factory) / "a"
    return cfg, out, harness.run_experiment(cfg, out)


@pytest.fixture(scope="session")
def desk_rerun(desk_run):
    """A second, independent run of the same config with its own empty cache."""
    cfg, out_a, _ = desk_run
    out = out_a.parent / "b"
    return harness.run_experiment(cfg, out)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
