"""
Unit tests for the binary checkpoint format.
"""

import os
import struct
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from mvlt_str.checkpoint import (
    MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, restore_model, save_checkpoint,
)
from mvlt_str.config import micro_model_config
from mvlt_str.errors import CheckpointError, StorageError
from mvlt_str.model import MvltModel
from mvlt_str.optim import AdamWState


@pytest.fixture
def model():
    return MvltModel(micro_model_config(), seed=4)


@pytest.fixture
def optimizer(model):
    state = AdamWState.for_store(model.store)
    rng = np.random.default_rng(0)
    for name in state.m:
        state.m[name] = rng.normal(size=state.m[name].shape)
        state.v[name] = rng.uniform(size=state.v[name].shape)
    state.t = 17
    return state


class TestCheckpointRoundtrip:
    """Test cases for saving and loading checkpoints."""

    def test_weights_and_state_survive(self, tmp_path, model, optimizer):
        """Test tensors, optimizer moments, rng state and step load back exactly."""
        path = save_checkpoint(tmp_path / "a.ckpt", model, optimizer, {"seed": 3, "next_step": 18}, 17)
        ckpt = load_checkpoint(path)
        assert ckpt.step == 17
        assert ckpt.rng_state == {"seed": 3, "next_step": 18}
        assert ckpt.model_config == model.config
        assert list(ckpt.tensors) == model.store.names()
        for name, p in model.store.items():
            assert np.array_equal(ckpt.tensors[name], p.data)
            assert np.array_equal(ckpt.optimizer.m[name], optimizer.m[name])
            assert np.array_equal(ckpt.optimizer.v[name], optimizer.v[name])
        assert ckpt.optimizer.t == 17

    def test_restore_model_reproduces_outputs(self, tmp_path, model):
        """Test a restored model computes the same encoding bit for bit."""
        save_checkpoint(tmp_path / "m.ckpt", model)
        restored = restore_model(load_checkpoint(tmp_path / "m.ckpt"))
        patches = np.random.default_rng(1).uniform(size=(1, model.config.num_patches, model.config.patch_dim))
        assert np.array_equal(model.encode_full(patches).data, restored.encode_full(patches).data)

    def test_without_optimizer(self, tmp_path, model):
        """Test a weights-only checkpoint has no optimizer state."""
        save_checkpoint(tmp_path / "w.ckpt", model)
        assert load_checkpoint(tmp_path / "w.ckpt").optimizer is None

    def test_identical_state_identical_bytes(self, tmp_path, optimizer):
        """Test two equal models serialize to identical bytes."""
        a = MvltModel(micro_model_config(), seed=4)
        b = MvltModel(micro_model_config(), seed=4)
        save_checkpoint(tmp_path / "a.ckpt", a, optimizer, {"seed": 0}, 5)
        save_checkpoint(tmp_path / "b.ckpt", b, optimizer, {"seed": 0}, 5)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_trained_iterations(self, tmp_path, model):
        """Test the stored correction count is read back, and absent means None."""
        save_checkpoint(tmp_path / "f.ckpt", model, rng_state={"stage": "finetune", "iterations": 2})
        save_checkpoint(tmp_path / "p.ckpt", model, rng_state={"stage": "pretrain"})
        assert load_checkpoint(tmp_path / "f.ckpt").trained_iterations == 2
        assert load_checkpoint(tmp_path / "p.ckpt").trained_iterations is None

    @pytest.mark.parametrize("value", [-1, "3", 2.5, True])
    def test_bad_trained_iterations(self, tmp_path, model, value):
        """Test a stored correction count that is not a non-negative int raises CheckpointError."""
        save_checkpoint(tmp_path / "b.ckpt", model, rng_state={"iterations": value})
        with pytest.raises(CheckpointError, match="iteration count"):
            load_checkpoint(tmp_path / "b.ckpt").trained_iterations

    def test_no_temporary_file_left(self, tmp_path, model):
        """Test the atomic write leaves only the final file."""
        save_checkpoint(tmp_path / "x.ckpt", model)
        assert sorted(os.listdir(tmp_path)) == ["x.ckpt"]


class TestCheckpointValidation:
    """Test cases for rejecting damaged checkpoints."""

    @pytest.fixture
    def payload(self, model, optimizer):
        from mvlt_str.checkpoint import Checkpoint
        from collections import OrderedDict
        tensors = OrderedDict((name, p.data.copy()) for name, p in model.store.items())
        return encode_checkpoint(Checkpoint(model.config, tensors, optimizer, {"seed": 1}, 3))

    def test_bad_magic(self, payload):
        """Test a file without the magic bytes is rejected."""
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + payload[4:])

    def test_unsupported_version(self, payload):
        """Test an unknown format version is rejected."""
        bumped = MAGIC + struct.pack("<I", 99) + payload[8:]
        with pytest.raises(CheckpointError, match="version 99"):
            decode_checkpoint(bumped)

    def test_truncated(self, payload):
        """Test every truncation point is detected."""
        for cut in (3, 10, len(payload) // 2, len(payload) - 1):
            with pytest.raises(CheckpointError):
                decode_checkpoint(payload[:cut])

    def test_trailing_bytes(self, payload):
        """Test extra bytes after the step counter are rejected."""
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(payload + b"\x00")

    def test_shape_mismatch_on_restore(self, model):
        """Test tensors that do not fit the stored config are rejected."""
        from mvlt_str.checkpoint import Checkpoint
        from collections import OrderedDict
        tensors = OrderedDict((name, p.data.copy()) for name, p in model.store.items())
        tensors["decoder.char_head.bias"] = np.zeros(99)
        with pytest.raises(CheckpointError, match="decoder.char_head.bias"):
            restore_model(Checkpoint(model.config, tensors))

    def test_missing_file(self, tmp_path):
        """Test a missing path raises a storage error naming the path."""
        with pytest.raises(StorageError) as exc_info:
            load_checkpoint(tmp_path / "absent.ckpt")
        assert exc_info.value.exit_code == 4
