import numpy as np
import pytest

from bayeshar import explain

EFFICIENCY_TOL = 1e-6

# every ShapExplanation produced while the suite runs is checked here
EMITTED = {"count": 0, "max_gap": 0.0}

_kernel_shap = explain.kernel_shap


def _checked_kernel_shap(*args, **kwargs):
    e = _kernel_shap(*args, **kwargs)
    gap = e.efficiency_gap()
    EMITTED["count"] += 1
    EMITTED["max_gap"] = max(EMITTED["max_gap"], gap)
    assert gap < EFFICIENCY_TOL, f"efficiency axiom violated: gap {gap:.3e}"
    return e


@pytest.fixture(autouse=True)
def _efficiency_guard(monkeypatch):
    monkeypatch.setattr(explain, "kernel_shap", _checked_kernel_shap)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
