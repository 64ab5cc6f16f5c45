import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def loop_conv2d(x, w, b):
    """Direct nested-loop 'same' convolution (cross-correlation), stride 1."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph : ph + h, pw : pw + wd] = x
    out = np.zeros((n, cout, h, wd))
    for i in range(n):
        for o in range(cout):
            for y in range(h):
                for z in range(wd):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, c, y + u, z + v] * w[o, c, u, v]
                    out[i, o, y, z] = acc
    return out


# criterion number -> (status, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{status}] {title}: {detail}")
