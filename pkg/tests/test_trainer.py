import numpy as np
import pytest

from motif_cdr.checkpoint import Stage, encode_checkpoint
from motif_cdr.encoder import MotifEncoder, Task
from motif_cdr.errors import StageError
from motif_cdr.evaluation import evaluate, recommend
from motif_cdr.graph import NodeKind
from motif_cdr.trainer import EpochRecord, Trainer, pretrain, prompt_tune


@pytest.fixture
def pretrained(tiny_split, tiny_config, test_logger):
    return pretrain(tiny_split, tiny_config, test_logger)


@pytest.fixture
def tuned(pretrained, tiny_split, tiny_config, test_logger):
    return prompt_tune(pretrained, tiny_split, 0, Task.INTRA, tiny_config, test_logger)


class TestPretrain:
    def test_zero_epochs_keeps_initialization(self, tiny_split, make_config):
        cfg = make_config(train={"pretrain_epochs": 0})
        ckpt = pretrain(tiny_split, cfg)
        initial = MotifEncoder(tiny_split.train, cfg).store.snapshot()
        assert set(ckpt.params) == set(initial)
        for name, value in initial.items():
            assert np.array_equal(ckpt.params[name], value), name

    def test_prompts_stay_at_identity(self, pretrained, tiny_split, tiny_config):
        initial = MotifEncoder(tiny_split.train, tiny_config).store.snapshot()
        for name in pretrained.params:
            if name.startswith("prompt."):
                assert np.array_equal(pretrained.params[name], initial[name]), name
        assert any(not np.array_equal(pretrained.params[n], initial[n]) for n in initial
                   if n.startswith("emb."))

    def test_deterministic(self, pretrained, tiny_split, tiny_config):
        again = pretrain(tiny_split, tiny_config)
        assert encode_checkpoint(again) == encode_checkpoint(pretrained)

    def test_stage_and_meta(self, pretrained):
        assert pretrained.stage is Stage.PRETRAINED
        assert pretrained.meta["epochs"] == 1
        assert "warnings" in pretrained.meta

    @pytest.mark.parametrize("lambda1", [0.0, 1.0])
    def test_single_loss_endpoints(self, tiny_split, make_config, lambda1):
        result = Trainer(tiny_split, make_config(train={"lambda1": lambda1})).pretrain()
        assert len(result.history) == 1
        assert np.isfinite(result.history[0].loss)
        for value in result.checkpoint.params.values():
            assert np.all(np.isfinite(value))

    def test_epoch_callback(self, tiny_split, make_config):
        seen = []
        Trainer(tiny_split, make_config(train={"pretrain_epochs": 2}),
                on_epoch=lambda stage, record: seen.append((stage, record))).pretrain()
        assert [record.epoch for _, record in seen] == [0, 1]
        assert all(stage == "pretrain" for stage, _ in seen)
        assert all(0.0 <= record.val_hr10 <= 1.0 for _, record in seen)


class TestPromptTune:
    def test_only_target_prompts_move(self, pretrained, tuned, tiny_split, tiny_config):
        tunable = set(MotifEncoder(tiny_split.train, tiny_config).prompt_names(0))
        assert tunable
        for name, value in pretrained.params.items():
            if name not in tunable:
                assert np.array_equal(tuned.params[name], value), name

    def test_tuned_meta(self, tuned):
        assert tuned.stage is Stage.TUNED
        assert tuned.meta["domain"] == 0
        assert tuned.meta["task"] == "intra"
        assert tuned.meta["paradigm"] == "ppt"
        assert 1 <= tuned.meta["epochs"] <= 2

    def test_inter_task(self, pretrained, tiny_split, tiny_config):
        ckpt = prompt_tune(pretrained, tiny_split, 1, Task.INTER, tiny_config)
        assert ckpt.meta["task"] == "inter"
        tunable = set(MotifEncoder(tiny_split.train, tiny_config).prompt_names(1))
        for name, value in pretrained.params.items():
            if name not in tunable:
                assert np.array_equal(ckpt.params[name], value), name

    def test_deterministic(self, pretrained, tuned, tiny_split, tiny_config):
        again = prompt_tune(pretrained, tiny_split, 0, Task.INTRA, tiny_config)
        assert encode_checkpoint(again) == encode_checkpoint(tuned)

    def test_full_fine_tuning(self, pretrained, tiny_split, make_config):
        ckpt = prompt_tune(pretrained, tiny_split, 0, Task.INTRA, make_config(train={"paradigm": "pf"}))
        assert ckpt.meta["paradigm"] == "pf"
        assert ckpt.stage is Stage.TUNED

    def test_rejects_tuned_checkpoint(self, tuned, tiny_split, tiny_config):
        with pytest.raises(StageError, match="prompt-tune"):
            prompt_tune(tuned, tiny_split, 0, Task.INTRA, tiny_config)

    def test_history_records(self, pretrained, tiny_split, tiny_config):
        result = Trainer(tiny_split, tiny_config).prompt_tune(pretrained, 0, Task.INTRA)
        assert all(isinstance(r, EpochRecord) for r in result.history)
        assert [r.epoch for r in result.history] == list(range(len(result.history)))


class TestEvaluateAndRecommend:
    def test_metrics_in_range(self, tuned, tiny_split, tiny_config):
        report = evaluate(tuned, tiny_split, 0, Task.INTRA, tiny_config)
        assert 0.0 <= report.ndcg <= report.hr <= 1.0
        assert report.n_users + report.skipped == len(tiny_split.intra[0].test)

    def test_recommend_excludes_known_items(self, tuned, tiny_split, tiny_config):
        full = tiny_split.full.graphs[0]
        users = [node.local_id for node in full.users[:3]]
        recs = recommend(tuned, tiny_split, 0, users + [999], 3, tiny_config)
        assert recs[-1].error
        for rec in recs[:-1]:
            user = full.node(NodeKind.USER, rec.user).per_domain_id
            assert len(rec.items) <= 3
            scores = [score for _, score in rec.items]
            assert scores == sorted(scores, reverse=True)
            for item, _ in rec.items:
                assert not full.has_edge(user, full.node(NodeKind.ITEM, item).per_domain_id)

    def test_recommend_needs_tuned_checkpoint(self, pretrained, tiny_split, tiny_config):
        with pytest.raises(StageError, match="recommend"):
            recommend(pretrained, tiny_split, 0, [0], 3, tiny_config)
