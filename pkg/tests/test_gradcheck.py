"""
Tests for the finite-difference gradient check.
"""

import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from mvlt_str.config import micro_model_config
from mvlt_str.errors import NumericError
from mvlt_str.gradcheck import (
    GRADIENT_FLOOR, GradCheckResult, check_or_raise, random_batch, relative_error, run_gradcheck,
)
from mvlt_str.model import MvltModel
from mvlt_str.objectives import mixed_batch_loss


class TestGradCheck:
    """Test cases for run_gradcheck and check_or_raise."""

    def test_micro_model_passes(self):
        """Test every parameter's gradient matches central differences within 1e-4."""
        result = run_gradcheck()
        assert result.checked == MvltModel(micro_model_config(init_std=0.2)).num_parameters()
        assert result.max_rel_error <= 1e-4
        assert result.passed
        assert check_or_raise(result) is result

    def test_random_batch_mixes_both_kinds(self):
        """Test the check batch holds labeled and unlabeled rows."""
        model = MvltModel(micro_model_config(), seed=0)
        batch = random_batch(model, np.random.default_rng(0), 2, 1)
        assert batch.n_labeled == 2 and batch.n_unlabeled == 1

    def test_failing_result_raises(self):
        """Test a result above tolerance raises NumericError with exit code 3."""
        result = GradCheckResult(0.5, "encoder.patch_embed.weight", (0, 1), 1.0, 2.0, 10, 0.1, 1e-4)
        assert not result.passed
        with pytest.raises(NumericError, match="encoder.patch_embed.weight") as exc_info:
            check_or_raise(result)
        assert exc_info.value.exit_code == 3

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_other_seeds_pass(self, seed):
        """Test the micro check stays within 1e-4 for other seeds too."""
        result = run_gradcheck(seed=seed)
        assert result.max_rel_error <= 1e-4, (result.worst_parameter, result.analytic, result.numeric)

    def test_tiny_gradients_use_the_floor(self):
        """Test rounding noise on a vanishing gradient is not reported as a mismatch."""
        assert relative_error(3.8e-19, -1.1e-11) < 1e-4
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1.0, 1.001) == pytest.approx(0.001 / 1.001)
        assert relative_error(GRADIENT_FLOOR, 0.0) == 1.0


class TestAttentionParameters:
    """Every attention parameter must be reachable by the loss."""

    def test_no_key_bias(self):
        """Test attention registers query and value biases but no fused qkv bias."""
        names = MvltModel(micro_model_config(), seed=0).store.names()
        assert "encoder.blocks.0.attn.qkv.weight" in names
        assert "encoder.blocks.0.attn.q_bias" in names
        assert "decoder.blocks.0.attn.v_bias" in names
        assert not any(name.endswith("qkv.bias") for name in names)

    def test_attention_gradients_are_nonzero(self):
        """Test each attention tensor gets a gradient from the pretraining loss."""
        model = MvltModel(micro_model_config(init_std=0.2), seed=0)
        batch = random_batch(model, np.random.default_rng(5))
        model.store.zero_grad()
        loss, _ = mixed_batch_loss(batch, model)
        loss.backward()
        for name, param in model.store.items():
            if ".attn." in name:
                assert np.abs(param.grad).max() > 1e-10, name
