import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from msmic import TreatmentFrame

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile("default")

# finite-difference checks: step 1e-6, relative error 1e-5
FD_STEP = 1e-6
FD_RTOL = 1e-5


def central_diff(f, x, h=FD_STEP):
    """Jacobian of ``f`` at ``x`` by central differences; rows follow f's output."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    jac = np.zeros(f0.shape + x.shape)
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx.flat[i] = h
        jac[..., i] = (np.asarray(f(x + dx)) - np.asarray(f(x - dx))) / (2 * h)
    return jac


def assert_fd(analytic, numeric, rtol=FD_RTOL, atol=1e-7):
    """Relative error against the larger of the two magnitudes (entrywise floor ``atol``)."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    assert analytic.shape == numeric.shape
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), atol / rtol)
    err = np.max(np.abs(analytic - numeric)) / scale
    assert err <= rtol, f"finite-difference mismatch: rel err {err:.2e}"


def random_frame(rng, N=200, H=2, dim_x=2, dim_z=1, outcome="gaussian", shared=False):
    z = rng.standard_normal((N, dim_z))
    arm = np.arange(N) % H
    rng.shuffle(arm)
    t = np.eye(H)[arm]
    if shared:
        x = np.hstack([np.ones((N, 1)), rng.standard_normal((N, dim_x - 1))])
    else:
        x = np.concatenate([np.ones((N, H, 1)), rng.standard_normal((N, H, dim_x - 1))], axis=2)
    if outcome == "gaussian":
        y = rng.standard_normal(N) + z[:, 0]
    else:
        y = (rng.random(N) < 0.4).astype(float)
    return TreatmentFrame(y, t, x, z)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for the terminal summary."""

    def record(name, ok, detail):
        request.config.acceptance_lines.append(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record
