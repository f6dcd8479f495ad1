import numpy as np
import pytest
import yaml

from motif_cdr.config import ConfigManager
from motif_cdr.errors import ConfigError
from motif_cdr.graph import NodeKind, load_dataset
from motif_cdr.synth import SynthSpec, generate, write_dataset


@pytest.fixture
def spec():
    return SynthSpec(clusters=3, users=30, items=24, overlap=0.2, noise=0.1, min_interactions=4,
                     max_interactions=8, seed=11)


class TestSynthSpec:
    @pytest.mark.parametrize("kwargs", [
        {"clusters": 1},
        {"overlap": 1.5},
        {"noise": -0.1},
        {"min_interactions": 9, "max_interactions": 8},
        {"overlap_users": 500, "users": 10},
        {"domains": 1, "overlap": 0.5},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SynthSpec(**kwargs)

    def test_overlap_count(self):
        assert SynthSpec(users=500, overlap=0.2).n_overlap == 100
        assert SynthSpec(overlap_users=7).n_overlap == 7


class TestGenerate:
    def test_deterministic(self, spec):
        assert generate(spec).domains[1].pairs == generate(spec).domains[1].pairs

    def test_interaction_counts(self, spec):
        data = generate(spec)
        for dom in data.domains.values():
            counts = np.bincount([u for u, _ in dom.pairs], minlength=spec.users)
            assert counts.min() >= spec.min_interactions
            assert counts.max() <= spec.max_interactions

    def test_overlapped_users_share_cluster(self, spec):
        data = generate(spec)
        assert len(data.overlap) == spec.n_overlap
        for local_a, local_b, _ in data.overlap:
            assert data.domains[0].user_clusters[local_a] == data.domains[1].user_clusters[local_b]

    def test_noiseless_users_stay_in_cluster(self):
        data = generate(SynthSpec(clusters=2, users=10, items=10, noise=0.0, min_interactions=2,
                                  max_interactions=4, seed=1))
        dom = data.domains[0]
        for u, i in dom.pairs:
            assert dom.user_clusters[u] == dom.item_clusters[i]

    def test_items_balanced_over_clusters(self, spec):
        dom = generate(spec).domains[0]
        assert np.bincount(dom.item_clusters).tolist() == [8, 8, 8]


class TestWriteDataset:
    def test_files_and_ready_config(self, spec, tmp_path):
        paths = write_dataset(generate(spec), tmp_path / "bench", eval_negatives=9)
        assert {"domain0", "domain1", "overlap", "manifest", "config"} <= set(paths)
        cfg = ConfigManager(paths["config"]).load()
        assert cfg.eval.negatives == 9
        assert cfg.seed == spec.seed
        dataset = load_dataset(cfg.data.interactions, cfg.data.overlap, cfg.data.overlap_domains)
        assert len(dataset.overlap.shared(0, 1)) == spec.n_overlap

    def test_overlap_map_binds_the_right_users(self, spec, tmp_path):
        data = generate(spec)
        paths = write_dataset(data, tmp_path)
        dataset = load_dataset({0: paths["domain0"], 1: paths["domain1"]}, paths["overlap"])
        local_a, local_b, gid = data.overlap[0]
        assert dataset.graphs[0].node(NodeKind.USER, local_a).global_id == gid
        assert dataset.graphs[1].node(NodeKind.USER, local_b).global_id == gid

    def test_manifest_lists_planted_clusters(self, spec, tmp_path):
        paths = write_dataset(generate(spec), tmp_path)
        manifest = yaml.safe_load(paths["manifest"].read_text())
        assert manifest["spec"]["clusters"] == 3
        assert len(manifest["domains"][0]["user_clusters"]) == spec.users
