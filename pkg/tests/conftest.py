import logging

import pytest

from motif_cdr.config import ConfigManager, PipelineConfig
from motif_cdr.graph import load_dataset
from motif_cdr.splits import split_dataset
from motif_cdr.synth import SynthSpec, generate, write_dataset

TINY_SPEC = SynthSpec(clusters=2, users=12, items=8, domains=2, overlap=0.5, noise=0.0,
                      min_interactions=3, max_interactions=4, seed=3)

TINY_SETTINGS = {
    "motifs": {"kind": "butterfly", "budget": 3},
    "model": {"d": 8, "heads": 2, "hypergraph_layers": 1, "transformer_layers": 1},
    "train": {"batch_size": 8, "pretrain_epochs": 1, "tune_epochs": 2, "oracle_epochs": 1,
              "lr": 0.01, "patience": 2},
    "eval": {"negatives": 3, "cold_fraction": 0.2},
}


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    write_dataset(generate(TINY_SPEC), out, eval_negatives=3)
    return out


@pytest.fixture
def make_config(tiny_dir):
    """Factory for small configs over the tiny dataset; keyword args patch single sections."""
    base = ConfigManager(tiny_dir / "config.yaml").load().to_dict()

    def factory(**sections) -> PipelineConfig:
        raw = {key: dict(value) if isinstance(value, dict) else value for key, value in base.items()}
        for name, values in TINY_SETTINGS.items():
            raw[name].update(values)
        for name, values in sections.items():
            if isinstance(values, dict):
                raw[name].update(values)
            else:
                raw[name] = values
        return PipelineConfig.from_dict(raw)
    return factory


@pytest.fixture
def tiny_config(make_config):
    return make_config()


@pytest.fixture
def tiny_split(tiny_config):
    data = tiny_config.data
    dataset = load_dataset(data.interactions, data.overlap, data.overlap_domains)
    return split_dataset(dataset, tiny_config.seed, tiny_config.eval.cold_fraction, data.overlap_domains)


@pytest.fixture
def test_logger():
    return logging.getLogger("test")
