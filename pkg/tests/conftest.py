import time

import numpy as np
import pytest

from remoh_lab.model import ModelConfig, build_model, register_concept
from remoh_lab.synth import CompositionConfig, build_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config._suite_start = time.time()


def pytest_collection_modifyitems(items):
    last = [i for i in items if i.name == "test_criterion_10_suite_time"]
    items[:] = [i for i in items if i not in last] + last


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


SMALL_DATA = CompositionConfig(context_rich=3, high_fidelity=3, hard_negative=3, random_negative=2, qa_per_clip=6)


@pytest.fixture(scope="session")
def small_manifest():
    return build_dataset(SMALL_DATA, seed=3)


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(d_model=16, vocab_size=40, heads=4, shared=1, active=2, tokens_per_concept=3, frames=3,
                      encoder_layers=2, question_len=5, answer_len=4, lora_rank=2, max_concepts=2)
    m = build_model(cfg, 0)
    register_concept(m, "a")
    register_concept(m, "b")
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_MODEL = dict(d_model=16, heads=4, shared=1, active=2, tokens_per_concept=2, frames=3, encoder_layers=1,
                  lora_rank=2)
TINY_DATA = dict(d_model=16, frames=3, context_rich=3, high_fidelity=3, hard_negative=3, random_negative=3,
                 qa_per_clip=4)
TINY_TRAIN = dict(max_steps=3, batch_size=4)

TINY_TOML = "\n".join(
    [f"[{sec}]\n" + "\n".join(f"{k} = {v}" for k, v in d.items())
     for sec, d in (("model", TINY_MODEL), ("data", TINY_DATA), ("train", TINY_TRAIN))]) + "\n"


@pytest.fixture
def tiny_experiment():
    from remoh_lab.ablation import ExperimentConfig
    from remoh_lab.training import TrainConfig
    return ExperimentConfig(ModelConfig(**TINY_MODEL), TrainConfig(**TINY_TRAIN), CompositionConfig(**TINY_DATA))
