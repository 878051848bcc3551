from __future__ import annotations

import time
from pathlib import Path

import pytest

from medaide.config import load_config
from medaide.engine import Engine

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

SESSION_START = time.monotonic()

DEMO_QUERY = (
    "I have a fever and chills, and I took ibuprofen yesterday. What should I do?"
)


@pytest.fixture(scope="session")
def mock_engine() -> Engine:
    return Engine(load_config(FIXTURES / "configs" / "mock.ini"))


@pytest.fixture()
def replay_engine() -> Engine:
    return Engine(load_config(FIXTURES / "configs" / "replay-golden.ini"))
