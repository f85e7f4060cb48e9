import numpy as np
import pytest

from dualmpc.config import read_benchmark, with_overrides
from dualmpc.model import CostSpec, ModelSet, affine_mode, input_gain_mode


@pytest.fixture(scope="session")
def bench():
    return read_benchmark()


@pytest.fixture(scope="session")
def short_bench(bench):
    """The aircraft benchmark cut to 15 steps with an 8-step horizon."""
    return with_overrides(
        bench,
        scenario={"N": 8},
        truth={
            "run_length": 15,
            "mode_schedule": [{"step": 0, "mode": 0, "gamma": ["1"]}, {"step": 5, "mode": 1, "gamma": ["0.25"]}],
            "reference_schedule": [{"step": 0, "value": ["0"] * 4}, {"step": 10, "value": ["0", "0", "0", "50"]}],
        },
    )


def scalar_mode(name="m", a=1.0, b=1.0, mean=0.4, var=0.01, noise=0.09, prob=1.0):
    return input_gain_mode(name, [[a]], [[b]], prior_mean=[mean], prior_cov=[[var]], noise_cov=[[noise]], prior_prob=prob)


def random_models(rng, n_x=3, n_u=1, n_m=2, n_gamma=1, noise=0.05, bound=1.0):
    """Stable random affine modes with uncertain input and state coefficients."""
    probs = rng.dirichlet(np.ones(n_m))
    modes = []
    for m in range(n_m):
        A = rng.normal(size=(n_x, n_x))
        A *= 0.8 / max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))
        B = rng.normal(size=(n_x, n_u))
        Gu = rng.normal(size=(n_gamma, n_x, n_u))
        Gx = 0.1 * rng.normal(size=(n_gamma, n_x, n_x))
        M = rng.normal(size=(n_gamma, n_gamma))
        modes.append(
            affine_mode(
                f"m{m}",
                A,
                B,
                Gx,
                Gu,
                prior_mean=rng.normal(size=n_gamma),
                prior_cov=0.1 * M @ M.T + 0.05 * np.eye(n_gamma),
                noise_cov=noise * np.eye(n_x),
                prior_prob=probs[m] / probs.sum(),
            )
        )
    return ModelSet(tuple(modes), n_x, n_u, -bound * np.ones(n_u), bound * np.ones(n_u))


def tracking_cost(n_x, n_u, length, rng=None, r=0.1):
    ref = np.zeros((length, n_x)) if rng is None else rng.normal(size=(length, n_x))
    return CostSpec(np.eye(n_x), r * np.eye(n_u), 2.0 * np.eye(n_x), ref)


_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary and return the verdict."""

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
