import numpy as np
import pytest

from hdbeta.mcmc import SamplerConfig, run_chains
from hdbeta.simulate import CovariateGenerator, SimulationScenario, simulate_panel


def small_scenario(seed=0, **kw):
    base = dict(
        n_levels=2,
        n_years=3,
        schools_per_level=25,
        mean_covariates=(CovariateGenerator("adm", "binary", prob=0.3), CovariateGenerator("hdi", "normal")),
        precision_covariates=(CovariateGenerator("nstudent", "lognormal_count", time_varying=True),),
        seed=seed,
    )
    base.update(kw)
    return SimulationScenario(**base)


@pytest.fixture(scope="session")
def small_panel():
    sc = small_scenario()
    table, truth = simulate_panel(sc)
    return sc, table, truth


@pytest.fixture(scope="session")
def small_fit(small_panel):
    sc, table, truth = small_panel
    spec = sc.model_spec()
    config = SamplerConfig(iterations=1500, burn_in=500, thin=10, seed=3, chains=2)
    return spec, config, run_chains(table, spec, config)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    detail = dict(report.user_properties).get("detail", "")
    entry = _CRITERIA.setdefault(number, {"name": name, "ok": True, "detail": ""})
    if report.when == "call" or report.failed:
        entry["ok"] = entry["ok"] and report.passed
        entry["detail"] = detail or entry["detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {e['name']}  {e['detail']}")
