import pytest
import torch
from hypothesis import HealthCheck, settings

from pamfn.data import FeatureDims, SyntheticSpec, generate_synthetic
from pamfn.network import ModelConfig
from pamfn.training import TrainConfig

torch.set_num_threads(1)

settings.register_profile(
    "suite",
    max_examples=40,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

# One line per acceptance criterion, printed in the terminal summary so the
# outcome of every criterion is visible in a single place.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic dataset shared by training/eval/CLI tests."""
    spec = SyntheticSpec(
        n_videos=8, t_range=(12, 20), dims=FeatureDims(6, 7, 5), seed=3
    )
    return generate_synthetic(spec, tmp_path_factory.mktemp("tiny_data"))


@pytest.fixture()
def tiny_model_config():
    return ModelConfig(d=8, n_stages=2, k_experts=3, dropout=0.0)


@pytest.fixture()
def tiny_train_config():
    return TrainConfig(seed=5, window=8, batch_size=4, phase1_epochs=2, phase2_epochs=2)
