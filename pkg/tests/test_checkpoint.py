import numpy as np
import pytest

from motif_cdr.autodiff import ParamStore
from motif_cdr.checkpoint import (MAGIC, Checkpoint, Stage, decode_checkpoint, encode_checkpoint,
                                  load_checkpoint, save_checkpoint)
from motif_cdr.errors import ParseError, StageError


@pytest.fixture
def checkpoint():
    store = ParamStore()
    store.add("emb.shared", np.arange(6.0).reshape(3, 2))
    store.add("prompt.d0.shared.p_vec", np.ones(2))
    store.add("scalar", 1.5)
    store.freeze(["emb.shared"])
    return Checkpoint.from_store(store, {"seed": 7}, Stage.PRETRAINED, {"seed": 7, "epochs": 2},
                                 {"warnings": {"cold_nodes": 1}})


class TestCheckpointFile:
    def test_round_trip(self, tmp_path, checkpoint):
        path = save_checkpoint(tmp_path / "ckpts" / "a.ckpt", checkpoint)
        loaded = load_checkpoint(path)
        assert loaded.stage is Stage.PRETRAINED
        assert loaded.frozen == ["emb.shared"]
        assert loaded.meta == {"warnings": {"cold_nodes": 1}}
        assert loaded.rng_state == {"seed": 7, "epochs": 2}
        for name, value in checkpoint.params.items():
            np.testing.assert_array_equal(loaded.params[name], value)
        assert loaded.params["scalar"].shape == ()

    def test_equal_checkpoints_equal_bytes(self, checkpoint):
        again = Checkpoint(dict(reversed(list(checkpoint.params.items()))), dict(checkpoint.config),
                           checkpoint.stage, list(checkpoint.frozen), dict(checkpoint.rng_state),
                           dict(checkpoint.meta))
        assert encode_checkpoint(again) == encode_checkpoint(checkpoint)

    def test_to_store_restores_freeze_mask(self, checkpoint):
        store = checkpoint.to_store()
        assert [name for name, _ in store.trainable()] == ["prompt.d0.shared.p_vec", "scalar"]

    def test_bad_magic(self):
        with pytest.raises(ParseError):
            decode_checkpoint(b"not a checkpoint")

    def test_truncated_payload(self, checkpoint):
        data = encode_checkpoint(checkpoint)
        with pytest.raises(ParseError):
            decode_checkpoint(data[:-8])

    def test_corrupt_header(self):
        with pytest.raises(ParseError):
            decode_checkpoint(MAGIC + b"5\n{oops")


class TestStage:
    def test_require_stage(self, checkpoint):
        checkpoint.require_stage(Stage.PRETRAINED, "prompt-tune")
        with pytest.raises(StageError, match=r"\[recommend\]"):
            checkpoint.require_stage(Stage.TUNED, "recommend")
