import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cortical_ssm.model import ModelConfig, init_params
from cortical_ssm.wavelet_conv import FrontEndConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    """M=4, F=8, T=64, L=1, Q=8, N=2 with a small head; fs=64 keeps the conv kernel at 32 taps."""
    base = dict(M=4, T=64, N=2, fs=64.0, L=1, Q=8, head_hidden=16,
                front_end=FrontEndConfig(F=8, f_min=2.0, f_max=30.0))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
