import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from inferkit.checkpoint import random_checkpoint  # noqa: E402
from inferkit.engine import Model  # noqa: E402
from inferkit.modelspec import ModelSpec  # noqa: E402

_CRITERIA: list[str] = []


def make_spec(**kw) -> ModelSpec:
    base = dict(
        network_type="decoder_only", normalization_function="rms", activation_function="silu",
        position_embedding="rope", decoder_heads=8, layers=2, hidden_dim=32, ffn_dim=64,
        vocab_size=64, max_context=64,
    )
    base.update(kw)
    return ModelSpec(**base)


def make_model(seed: int = 0, **kw) -> Model:
    spec = make_spec(**kw)
    return Model.from_checkpoint(spec, random_checkpoint(spec, seed))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the run summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        _CRITERIA.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
