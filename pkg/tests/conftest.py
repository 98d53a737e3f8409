import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ngstwa.gaussian_core import NGSState

settings.register_profile(
    "ngstwa",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("ngstwa")


def random_state(rng, n_spins=0, n_gaussians=1, n_modes=1, squeezing=False, disp=1.0, rmax=0.8, rmin=0.0):
    """Random NGS state with O(1) parameters; every configuration is populated."""
    S = 2**n_spins
    shape = (S, n_gaussians, n_modes)
    kw = dict(
        kappa=0.3 * rng.normal(size=shape[:2]),
        theta=rng.uniform(-np.pi, np.pi, size=shape[:2]),
        x=disp * rng.normal(size=shape),
        y=disp * rng.normal(size=shape),
    )
    if squeezing:
        kw["r"] = rng.uniform(rmin, rmax, size=shape)
        kw["phi"] = rng.uniform(-np.pi, np.pi, size=shape)
    return NGSState(n_spins, squeezing_enabled=squeezing, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_REPORT_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_REPORT_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(number, passed, detail)``."""
    table = request.config.stash[_REPORT_KEY]

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        table[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_REPORT_KEY, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(table):
        terminalreporter.write_line(table[key])


def random_operator(rng, n_spins, n_modes, n_terms=6, max_power=2, hermitian=True):
    """Random sum of Pauli strings times normal-ordered monomials."""
    from ngstwa.hamiltonian import SpinBosonOperator

    items = []
    for _ in range(n_terms):
        spins = "".join(rng.choice(list("IXYZ"), size=n_spins)) if n_spins else ""
        powers = [tuple(int(v) for v in rng.integers(0, max_power + 1, size=2)) for _ in range(n_modes)]
        items.append((complex(rng.normal(), rng.normal()), spins, powers))
    op = SpinBosonOperator.from_terms(n_spins, n_modes, items)
    return 0.5 * (op + op.adjoint()) if hermitian else op
