"""Shared fixtures.  The desk experiment (corpus, backbone, zoo) is built once per session."""

import numpy as np
import pytest
import torch

from prompt2lora import experiment as ex
from prompt2lora.backbone import Backbone, BackboneConfig
from prompt2lora.zoo import LoRACheckpoint

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def desk_config():
    return ex.load_config()


@pytest.fixture(scope="session")
def desk(desk_config):
    """(config, tasks, zoo) at the default desk scale: five tasks, 20 saved checkpoints each."""
    tasks = ex.build_tasks(desk_config)
    zoo = ex.collect_zoo(desk_config, tasks)
    return desk_config, tasks, zoo


@pytest.fixture(scope="session")
def random_backbone():
    """Untrained backbone; enough for structural tests that never look at accuracy."""
    return Backbone(BackboneConfig(seed=3))


def random_checkpoint(rng, schema, rank=4, task_id="t", step_id=0, scale=1.0):
    layers = [(name, (rng.standard_normal((rank, k)) * scale).astype(np.float32),
               (rng.standard_normal((d, rank)) * scale).astype(np.float32)) for name, d, k in schema]
    return LoRACheckpoint(task_id, step_id, layers, rank)


# criterion number -> (passed, detail); filled by test_acceptance, printed at session end
ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
