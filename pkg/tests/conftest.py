import numpy as np
import pytest

from pgnlab.transformer import ModelConfig


def toy_config(vocab_size=50, **kw) -> ModelConfig:
    base = dict(vocab_size=vocab_size, num_layers=2, num_heads=2, hidden_size=64, ffn_size=128,
                max_len=32, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-12) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a, b = np.ravel(np.asarray(a, float)), np.ravel(np.asarray(b, float))
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Record a PASS/FAIL line for the terminal summary, then fail the test if needed."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
