import pytest

from fedadv.data import GenConfig
from fedadv.fed import FedConfig, TrainConfig
from fedadv.harness import ExperimentConfig, ModelConfig

TINY_DATA = GenConfig(n_train=300, n_ood=120, n_ood_sites=6, min_site_count=5)


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    """Small enough for a full federated run in well under a second."""
    return ExperimentConfig(
        data=TINY_DATA,
        model=ModelConfig(fe_hidden=(8,), feature_dim=6, disc_hidden=(16,)),
        fed=FedConfig(clients=5, rounds=2, local_epochs=1),
        train=TrainConfig(batch_size=64, centralized_epochs=2, validate_every=1),
    )


ACCEPTANCE: dict[str, tuple[bool, str]] = {}
_CALL_FAILED = pytest.StashKey[bool]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.stash[_CALL_FAILED] = report.failed


@pytest.fixture
def criterion(request):
    """Record the outcome of a named acceptance criterion for the end-of-run summary."""
    name = request.node.get_closest_marker("criterion").args[0]

    class Recorder:
        detail = ""

    rec = Recorder()
    yield rec
    failed = request.node.stash.get(_CALL_FAILED, True)
    ACCEPTANCE[name] = (not failed, rec.detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the run summary")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
