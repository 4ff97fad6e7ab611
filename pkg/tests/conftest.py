import json
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"
CONFIGS = Path(__file__).resolve().parents[1] / "src" / "resmppi" / "data" / "configs"

_criteria = {}


def write_config(path, cfg):
    path = Path(path)
    path.write_text(json.dumps(cfg, indent=1))
    return path


def load_packaged_config(name):
    return json.loads((CONFIGS / name).read_text())


@pytest.fixture
def record_criterion():
    """Record an acceptance line; the summary is printed at the end of the session."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _criteria[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        terminalreporter.write_line(_criteria[k])
