import pytest
import torch

from subject_edit.denoiser import DenoiserConfig, build_denoiser
from subject_edit.schedule import build_schedule

SMALL = DenoiserConfig(channel_widths=(8, 8, 8, 8), text_dim=8, time_dim=8, attention_window=4,
                       temporal_window=2)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture(scope="session")
def small_net(schedule):
    """Narrow two-frame network for fast structural tests."""
    return build_denoiser(SMALL, schedule)


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(1234)


@pytest.fixture
def small_latent():
    return torch.randn(2, 16, 16, 4, generator=torch.Generator().manual_seed(5))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
