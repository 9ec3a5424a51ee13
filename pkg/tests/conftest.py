import numpy as np
import pytest
import torch

from deprocams import simulator as sim
from deprocams.geometry import CalibrationPair, Extrinsics, Intrinsics


@pytest.fixture
def coincident_calib():
    K = Intrinsics(20.0, 20.0, 7.5, 7.5)
    return CalibrationPair(K, K, Extrinsics(np.eye(3), np.zeros(3)), (16, 16), (16, 16))


@pytest.fixture(scope="session")
def small_calib():
    return sim.default_calibration(cam_size=(24, 32))


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    """Print (and keep for the end-of-run summary) one pass/fail line per criterion."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
