import os

import torch

# Single-threaded BLAS keeps every run bit-reproducible.
torch.set_num_threads(int(os.environ.get("ADAPOWER_THREADS", "1") or 1))

CRITERIA: dict[int, str] = {}


def record(n: int, ok: bool, text: str) -> None:
    CRITERIA[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}"


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long-running acceptance criterion (deselect with -m 'not acceptance')")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
