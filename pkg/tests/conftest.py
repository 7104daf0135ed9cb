import json
import os
from pathlib import Path

import numpy as np
import pytest

from rcecg.preprocessing import filter_record
from rcecg.reservoir import ReservoirParams, build_reservoir
from rcecg.synthetic import bundled_dir, bundled_record_stem
from rcecg.wfdb_ingest import load_record

MITDB_ENV = "RCECG_MITDB_DIR"

# acceptance outcomes, keyed by criterion number, filled in by test_acceptance
ACCEPTANCE_RESULTS = {}


def mitdb_dir():
    d = os.environ.get(MITDB_ENV)
    if d and Path(d, "100.hea").exists():
        return Path(d)
    return None


@pytest.fixture(scope="session")
def synth_stem():
    return bundled_record_stem()


@pytest.fixture(scope="session")
def synth_manifest():
    return json.loads((bundled_dir() / "synth.manifest.json").read_text())


@pytest.fixture(scope="session")
def synth_record(synth_stem):
    return load_record(synth_stem)


@pytest.fixture(scope="session")
def synth_filtered(synth_record):
    return filter_record(synth_record)


@pytest.fixture(scope="session")
def small_params():
    return ReservoirParams(size=120, connections_per_node=10, washout=360, seed=3)


@pytest.fixture(scope="session")
def small_reservoir(small_params):
    return build_reservoir(small_params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {status:4s}  {detail}")
