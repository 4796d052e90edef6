import subprocess
import sys
from pathlib import Path

import pytest

from vnsa.cli import main

SMALL_CONFIG = """\
heads = 4
kv_heads = 2
head_dim = 8
block_size = 4
select_blocks = 2
window = 6
seq_len = 32
vision_spans = 1-24
layers = 2
seed = 7
bench_head_dim = 2
"""


def write_config(path: Path, text: str = SMALL_CONFIG, **extra) -> Path:
    lines = [text] + [f"{k} = {v}\n" for k, v in extra.items()]
    path.write_text("".join(lines), encoding="utf-8")
    return path


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys is not None else ""
    return code, out


def run_subprocess(argv, cwd=None, env=None):
    return subprocess.run([sys.executable, "-m", "vnsa", *map(str, argv)], cwd=cwd, env=env,
                          capture_output=True, text=True, timeout=600)


@pytest.fixture
def small_config(tmp_path):
    return write_config(tmp_path / "run.cfg")


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def record_verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
