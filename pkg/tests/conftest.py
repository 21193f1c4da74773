import numpy as np
import pytest

from colhar.data import AgentDataset
from colhar.errors import ArchitectureError
from colhar.nn import ModelArchitecture, SensorWindow

# (criterion number, title, passed, detail) rows printed after the run
ACCEPTANCE_LINES: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_LINES):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} -- {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_arch(rng, max_params=200) -> ModelArchitecture:
    while True:
        try:
            arch = ModelArchitecture(
                input_channels=int(rng.integers(1, 4)),
                num_classes=int(rng.integers(2, 5)),
                window_length=int(rng.integers(4, 12)),
                conv_out_channels=int(rng.integers(1, 5)),
                conv_kernel=int(rng.integers(1, 4)),
                pool_kernel=int(rng.integers(1, 4)),
            )
        except ArchitectureError:
            continue
        if arch.num_params <= max_params:
            return arch


def random_windows(rng, arch: ModelArchitecture, n: int, subject: str = "s") -> list[SensorWindow]:
    return [SensorWindow(rng.normal(size=(arch.input_channels, arch.window_length)),
                         int(rng.integers(0, arch.num_classes)), subject) for _ in range(n)]


def make_dataset(agent_id: int, windows, test=(), num_classes: int = 2) -> AgentDataset:
    return AgentDataset(agent_id, list(windows), list(test),
                        {c: c for c in range(num_classes)}, f"s{agent_id}")


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
