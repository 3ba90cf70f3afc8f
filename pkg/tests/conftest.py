import numpy as np
import pytest

from peter import autodiff as ad


def numeric_grad(f, t: ad.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``t``."""
    out = np.zeros_like(t.data)
    it = np.nditer(t.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = t.data[i]
        t.data[i] = old + h
        a = f()
        t.data[i] = old - h
        b = f()
        t.data[i] = old
        out[i] = (a - b) / (2 * h)
    return out


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest per-entry |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance verdict lines

ACCEPTANCE_LINES: list[str] = []


class Criterion:
    """Context manager that prints exactly one PASS/FAIL line for a criterion.

    An exception inside the block counts as FAIL and is re-raised.
    """

    def __init__(self, name: str):
        self.name = name
        self.ok = None
        self.detail = ""

    def check(self, ok: bool, detail: str) -> None:
        self.ok, self.detail = bool(ok), detail

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.ok, self.detail = False, f"{exc_type.__name__}: {exc}"
        if self.ok is None:
            self.ok, self.detail = False, "no verdict recorded"
        line = f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert self.ok, line
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
