import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pipeline import run_pipeline  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    """The smoke pipeline run twice with the same seed into separate directories."""
    dirs, seconds = [], []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"smoke_{tag}")
        seconds.append(run_pipeline(CONFIGS / "smoke.json", out))
        dirs.append(out)
    return {"dirs": dirs, "seconds": seconds}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
