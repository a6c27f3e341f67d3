import numpy as np
import pytest

from promptcl.backbone import BackboneState, ViTConfig
from promptcl.data import generate_synthetic, split_stream


@pytest.fixture(scope="session")
def tiny_config():
    return ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2, mlp_ratio=2.0)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_config):
    return BackboneState.init(tiny_config, np.random.default_rng(0)).freeze()


@pytest.fixture(scope="session")
def tiny_data():
    from promptcl.data import GratingSpec

    return generate_synthetic(8, 6, 3, GratingSpec(image_size=8), seed=0)


@pytest.fixture(scope="session")
def tiny_stream(tiny_data):
    return split_stream(tiny_data, 4, seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
