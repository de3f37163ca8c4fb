import numpy as np
import pytest

from mranet.data import TaskSpec, make_task_subset, stratified_split, write_synthetic_corpus
from mranet.model import AttentionStageSpec, ModelConfig, StemSpec
from mranet.trainer import TrainConfig


def tiny_config(k=3, **kw):
    """A one-stage network on 8x8 inputs: fast enough for multi-epoch tests."""
    return ModelConfig(
        input_shape=(3, 8, 8),
        stem=StemSpec(out_channels=4),
        stages=(AttentionStageSpec(4, mask_depth=1),),
        tail=1,
        num_classes=k,
        dropout_rate=0.25,
        **kw,
    )


def tiny_train_config(**kw):
    base = dict(model=tiny_config(), task=TaskSpec.for_k(3), learning_rate=1e-3, batch_size=8, epochs=2, seed=0,
                checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    write_synthetic_corpus(root, 8, seed=0, size=8)
    return root


@pytest.fixture(scope="session")
def lung_manifest(corpus_dir):
    from mranet.data import scan_directory

    return make_task_subset(stratified_split(scan_directory(corpus_dir), seed=0), TaskSpec.for_k(3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "SCORECARD", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
