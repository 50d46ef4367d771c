import numpy as np
import pytest

from fedtp.datagen import synth_image_task
from fedtp.federation import StrategySpec, TrainConfig, make_clients, Simulation
from fedtp.models import ModelConfig
from fedtp.partition import partition_pathological

TINY_MODEL = ModelConfig(num_blocks=1, num_heads=2, d_model=8, mlp_hidden=8, image_extent=8, num_classes=4)


@pytest.fixture(scope="session")
def tiny_data():
    ds = synth_image_task(num_classes=4, per_class=10, extent=8, seed=0)
    return ds, partition_pathological(ds, 3, 2, seed=0)


@pytest.fixture
def make_sim(tiny_data):
    ds, manifest = tiny_data

    def build(strategy="fedtp", **train):
        kw = dict(rounds=2, local_epochs=1, lr=0.05, server_lr=0.05, batch_size=8,
                  embed_dim=4, hyper_hidden=8, hyper_layers=1)
        kw.update(train)
        spec = strategy if isinstance(strategy, StrategySpec) else StrategySpec(strategy)
        return Simulation(TINY_MODEL, spec, TrainConfig(**kw), make_clients(ds, manifest))

    return build


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Log one verdict line per acceptance criterion; echoed in the session summary."""

    def _record(number, title, ok, detail=""):
        line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
