import numpy as np
import pytest
import torch

from patchforge.diffusion import StandinBackend, ZeroPredictor
from patchforge.diffusion.schedule import NoiseSchedule
from patchforge.oracle import LinearOracle
from patchforge.render import PatchRegion, Renderer
from patchforge.toy import make_face, toy_oracle

ACCEPTANCE = {}


def fd_gradient(f, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central finite differences of scalar ``f`` over every entry of ``x``."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + step
        hi = float(f(x))
        flat[i] = old - step
        lo = float(f(x))
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def autograd_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


@pytest.fixture(scope="session")
def backend():
    return StandinBackend()


@pytest.fixture
def zero_backend():
    return StandinBackend(schedule=NoiseSchedule.linear(50), predictor=ZeroPredictor())


@pytest.fixture
def faces():
    return [make_face(i) for i in range(6)]


@pytest.fixture
def oracle():
    return toy_oracle(seed=0)


@pytest.fixture
def plain_oracle():
    return LinearOracle.from_seed((3, 16, 16), 32, seed=5)


@pytest.fixture
def renderer():
    return Renderer(PatchRegion.lower_face(16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ACCEPTANCE[name] = rep.passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
