import numpy as np
import pytest
import torch

from cfisac.scenario import SystemConfig, build_channels, generate_dataset, sample_positions, scene_rng


@pytest.fixture
def system():
    return SystemConfig()


@pytest.fixture
def toy_system():
    # M=4, N=2 toy size used for gradient checks
    return SystemConfig(num_aps=2, antennas_per_ap=4, num_ues=2)


@pytest.fixture
def scene(system):
    return build_channels(sample_positions(system, scene_rng(7, 0)), system)


@pytest.fixture
def small_dataset(system):
    return generate_dataset(system, 60, 0.9, seed=3)


def random_beams(rng, L, M, Q, power=1.0):
    W = rng.standard_normal((L, M, Q)) + 1j * rng.standard_normal((L, M, Q))
    scale = np.sqrt(power / np.sum(np.abs(W) ** 2, axis=(1, 2)))
    return W * scale[:, None, None]


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
