import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA_ROOT = Path(os.environ.get("PANVAE_DATA", "/root/data"))

_acceptance_lines: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    _acceptance_lines.append(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")


@pytest.fixture(scope="session")
def acceptance_log():
    return record_acceptance


@pytest.fixture(scope="session")
def data_root():
    return DATA_ROOT


def require_dir(path: Path) -> Path:
    if not path.is_dir() or not any(path.iterdir()):
        pytest.skip(f"dataset directory {path} not found; set PANVAE_DATA")
    return path


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
