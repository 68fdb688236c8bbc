import numpy as np
import pytest

from pmoe.backbone import BackboneConfig, ExpertBackbone, make_synthetic_expert, weight_shapes
from pmoe.numerics import Rng

TOY = BackboneConfig()


def scaled_expert(cfg: BackboneConfig, seed: int, std: float = 0.3) -> ExpertBackbone:
    """Expert with O(1) random weights everywhere (including biases and
    layernorm affines), so tests exercise every term rather than a near-linear
    regime."""
    rng = Rng(seed)
    weights = {}
    for i, (name, shape) in enumerate(weight_shapes(cfg).items()):
        w = rng.child(i).normal(shape, std)
        weights[name] = 1.0 + w if name.endswith(".gamma") else w
    return ExpertBackbone(cfg, weights)


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture
def toy_expert():
    return make_synthetic_expert(TOY, Rng(1))


@pytest.fixture
def image():
    return Rng(77).normal((TOY.image_h, TOY.image_w, TOY.channels))


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    num = getattr(item.function, "criterion", None)
    if num is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        title = (item.function.__doc__ or "").strip().splitlines()[0]
        _ACCEPTANCE[num] = (rep.outcome, title, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        outcome, title, secs = _ACCEPTANCE[num]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  ({secs:6.1f}s)  {title}")
