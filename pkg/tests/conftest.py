import numpy as np
import pytest

from mialab import numerics as nx

_ACCEPTANCE_LINES: list[str] = []
ACCEPTANCE_IDS = tuple(f"C{i}" for i in range(1, 10))


@pytest.fixture
def acceptance_log():
    """Collects one summary line per acceptance criterion for the terminal report."""
    return _ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    logged = {line.split()[0] for line in _ACCEPTANCE_LINES}
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
    for cid in ACCEPTANCE_IDS:
        if cid not in logged:
            terminalreporter.write_line(f"{cid} NOT RUN (deselected; see tests/test_acceptance.py)")


def random_small_mlp(seed: int):
    """Random 2-3 layer MLP (width <= 16), batch <= 8, one-hot targets."""
    rng = np.random.default_rng(seed)
    n_layers = int(rng.integers(2, 4))
    sizes = [int(rng.integers(2, 9))]
    sizes += [int(rng.integers(2, 17)) for _ in range(n_layers - 1)]
    sizes += [int(rng.integers(2, 6))]
    model = nx.init_mlp(sizes, rng)
    for b in model.biases:
        b[:] = rng.normal(0.0, 0.1, size=b.shape)
    n = int(rng.integers(1, 9))
    x = rng.normal(size=(n, sizes[0]))
    targets = nx.one_hot(rng.integers(0, sizes[-1], size=n), sizes[-1])
    return model, x, targets
