from __future__ import annotations

import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
MASKING = FIXTURES / "masking"


def masking_cases() -> list[Path]:
    return sorted(p for p in MASKING.iterdir() if (p / "case.json").is_file())


def load_case(path: Path) -> dict:
    case = json.loads((path / "case.json").read_text(encoding="utf-8"))
    case["sketch"] = (path / "sketch.lean").read_text(encoding="utf-8")
    case["expected"] = (path / "expected.lean").read_text(encoding="utf-8")
    return case


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES
