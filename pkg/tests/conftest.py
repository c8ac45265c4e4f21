import numpy as np
import pytest

from vlflow.model import ModelConfig, ModelParams
from vlflow.train import TrainConfig

TINY_MODEL = dict(image_size=8, patch=4, dim=16, heads=2, vision_layers=2, mm_layers=3,
                  mlp_hidden=24, vocab=20, max_text_len=8)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_params(tiny_model_cfg):
    return ModelParams.init(tiny_model_cfg, np.random.default_rng(0))


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(model=ModelConfig(**TINY_MODEL), mfr_k=2, steps=4, images_per_step=2,
                       dataset_size=16, warmup_steps=2)


ACCEPTANCE_LINES = []


class Criterion:
    def __init__(self, name):
        self.name = name
        self.done = False

    def verdict(self, ok: bool, detail: str, seconds: float) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}: {detail} [{seconds:.1f} s]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        self.done = True
        assert ok, line


@pytest.fixture
def criterion(request):
    c = Criterion(request.node.name.removeprefix("test_"))
    yield c
    if not c.done:
        ACCEPTANCE_LINES.append(f"FAIL  {c.name}: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
