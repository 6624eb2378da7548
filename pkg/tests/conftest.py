import pytest
from hypothesis import settings

from labelhalluc.data import generate_synthetic
from labelhalluc.pipeline import ModelConfig, PretrainConfig, pretrain

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")

_acceptance = []


@pytest.fixture
def report():
    """Record one acceptance line; printed in the terminal summary."""
    def _record(number, passed, detail):
        _acceptance.append((number, passed, detail))
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_acceptance):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def benchmark():
    """Default synthetic benchmark: 20 base / 5 novel classes, dim 32, spread 0.25."""
    return generate_synthetic(20, 5, 32, 100, 0.25, seed=0)


@pytest.fixture(scope="session")
def pretrained(benchmark):
    base, _, _ = benchmark
    result = pretrain(base, ModelConfig(), PretrainConfig())
    return result.backbone, result.head


@pytest.fixture(scope="session")
def small_pretrained(benchmark):
    base, _, _ = benchmark
    result = pretrain(base, ModelConfig(hidden_dims=(16,), embed_dim=16),
                      PretrainConfig(epochs=3))
    return result.backbone, result.head
