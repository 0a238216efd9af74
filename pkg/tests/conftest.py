import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cmrcnet.model import ModelConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def micro_config(**overrides) -> ModelConfig:
    """B=2-friendly toy geometry: 4x4 images, 2x2 patches -> T=5, widths <= 16."""
    base = dict(
        image_size=4, vit_patch=2, vit_dim=8, vit_depth=1, vit_heads=2, vit_mlp_ratio=2,
        proj_dim=8, gene_dim=6, snn_hidden=16, recon_tokens=2, recon_dim=8,
        fusion_heads=2, init_xattn_heads=2, mask_rate=0.5,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def micro_batch():
    rng = np.random.default_rng(7)
    patches = rng.random((2, 4, 4, 3))
    expr = rng.random((2, 6)) * 3
    return patches, expr


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
