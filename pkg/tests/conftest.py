import numpy as np
import pytest

from decouple_distill.distill import tiny_models
from decouple_distill.encoder import EncoderConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny():
    """float64 tiny student/teacher/VFM plus its distill config."""
    return tiny_models(0)


@pytest.fixture
def small_cfg():
    return EncoderConfig(image_size=32, patch_size=16, depth=2, heads=2, dim=8, vl_dim=6)


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, 3)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
