import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def brute_force(a, b, tau_start, tau_end, bw, exclude_self=False):
    """Double-loop oracle for the correlator."""
    nb = -(-(tau_end - tau_start) // bw)  # last bin may extend past tau_end
    out = np.zeros(nb, np.int64)
    a = [int(x) for x in a]
    b = [int(x) for x in b]
    for i, ta in enumerate(a):
        for j, tb in enumerate(b):
            if exclude_self and i == j:
                continue
            d = ta - tb
            if tau_start <= d < tau_start + nb * bw:
                out[(d - tau_start) // bw] += 1
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(number: str, passed: bool, detail: str) -> None:
    """Remember one acceptance outcome and print it right away."""
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
