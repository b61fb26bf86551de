import numpy as np
import pytest

from ctrlf import tensor as T
from ctrlf.training import overfit_smoke


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# The two 200-step overfit runs are shared by the training and acceptance tests.
@pytest.fixture(scope="session")
def smoke_akf(tmp_path_factory):
    return overfit_smoke("akf", seed=0, out_dir=tmp_path_factory.mktemp("smoke_akf"))


@pytest.fixture(scope="session")
def smoke_ckf(tmp_path_factory):
    return overfit_smoke("ckf", seed=0, out_dir=tmp_path_factory.mktemp("smoke_ckf"))


@pytest.fixture
def verdict(request):
    """Print one PASS/FAIL line for an acceptance criterion, then assert it."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(label: str, checks: list):
        failed = [desc for desc, ok in checks if not ok]
        status = "FAIL" if failed else "PASS"
        detail = "; ".join(failed) if failed else f"{len(checks)} checks"
        line = f"[{status}] {label}: {detail}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        assert not failed, line

    return report
