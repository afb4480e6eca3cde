import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion; printed in the terminal summary."""

    def record(number, passed: bool, detail: str):
        _ACCEPTANCE[number] = (passed, detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE, key=lambda n: int(str(n).split()[0])):
        ok, detail = _ACCEPTANCE[k]
        verdict = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {k}: {verdict}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(h=64, w=64, seed=0, sigma=4.0):
    from scipy import ndimage

    r = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(r.random((h, w)), sigma)
    img = (img - img.min()) / (img.max() - img.min())
    return img
