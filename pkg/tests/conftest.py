"""Shared fixtures and the acceptance-criteria summary printer."""

import pytest
import torch

from docsr.losses import SobelEdgeNetwork, TinyFeatureExtractor
from docsr.model import DPNetConfig, init_dpnet

_ACCEPTANCE_OUTCOMES = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and report.when == "call":
        _ACCEPTANCE_OUTCOMES[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_OUTCOMES):
        outcome = _ACCEPTANCE_OUTCOMES[nodeid]
        tag = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{tag}  {nodeid.split('::')[-1]}")


def rand_image(channels, height, width, seed):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((channels, height, width), generator=gen)


@pytest.fixture
def tiny_config():
    return DPNetConfig(residual_blocks=1, feature_channels=4)


@pytest.fixture
def tiny_net(tiny_config):
    return init_dpnet(tiny_config, seed=3)


@pytest.fixture
def tiny_extractor():
    return TinyFeatureExtractor(image_channels=1)


@pytest.fixture
def sobel_edges():
    return SobelEdgeNetwork()
