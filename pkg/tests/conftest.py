import numpy as np
import pytest

from jointprune.space import ArchitectureSpace, LayerSpec


@pytest.fixture
def two_layer_space():
    """Maxima [32, 64], spatial 16, depth 2: the normalize examples."""
    layers = (
        LayerSpec("conv", 32, stride=2, block_id=0),
        LayerSpec("conv", 64, block_id=1),
    )
    return ArchitectureSpace(layers, input_channels=3, spatial_max=16, droppable_blocks=(0, 1), min_depth=0)


@pytest.fixture
def small_space():
    """A space with under 500 configurations, for exhaustive checks."""
    layers = (
        LayerSpec("conv", 4, min_out_channels=2, stride=2, block_id=0),
        LayerSpec("conv", 3, min_out_channels=1, block_id=1),
        LayerSpec("conv", 3, min_out_channels=1, block_id=2),
        LayerSpec("dense", 2, min_out_channels=2, has_relu=False, block_id=3),
    )
    return ArchitectureSpace(layers, input_channels=2, spatial_max=8, spatial_min=4,
                             tie_groups=((1, 2),), droppable_blocks=(1, 2), min_depth=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_results = {}


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
