import pytest
import torch
from hypothesis import HealthCheck, settings

from helpers import tiny_schedule
from lesionsynth.data import TOY_CLASSES, make_toy_dataset, write_samples

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def sched():
    return tiny_schedule()


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return write_samples(make_toy_dataset(24, 32, seed=0), root, TOY_CLASSES)


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_synth")
    samples = make_toy_dataset(24, 32, seed=1)
    for i, s in enumerate(samples):
        s.source = "synthetic"
        s.ident = f"synth_{i:05d}"
    return write_samples(samples, root, TOY_CLASSES)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
