import dataclasses

import pytest

from li3detr.config import RunConfig
from li3detr.scenegen import SceneConfig


def tiny_config(base_dir=".", **train) -> RunConfig:
    """A 32x32-cell, 16-channel model that trains a step in well under a second."""
    cfg = RunConfig(base_dir=str(base_dir))
    cfg.gen = SceneConfig(pc_range=(-12.8, -12.8, -5.0, 12.8, 12.8, 3.0), num_objects=(1, 3))
    cfg.backbone = dataclasses.replace(cfg.backbone, pfn_channels=8, channels=(8, 16, 16, 16),
                                       fpn_channels=16)
    cfg.encoder = dataclasses.replace(cfg.encoder, layers=1, heads=2, points=2, d_model=16,
                                      ffn_dim=32)
    cfg.decoder = dataclasses.replace(cfg.decoder, layers=2, num_queries=10, heads=2, d_model=16,
                                      ffn_dim=32)
    cfg.data = dataclasses.replace(cfg.data, train=3, val=2)
    cfg.train = dataclasses.replace(cfg.train, **{"epochs": 1, "log_every": 0, **train})
    cfg.optim = dataclasses.replace(cfg.optim, warmup_steps=1)
    return cfg


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path)


# one "A<n> PASS|FAIL ..." line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long-running acceptance criteria (A1-A9)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
