"""
Unit tests for pretraining, unlabeled and fine-tuning objectives.
"""

import dataclasses
import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from mvlt_str.config import ABLATIONS, LossToggles, micro_model_config
from mvlt_str.errors import ConfigError, ContractError
from mvlt_str.model import MvltModel
from mvlt_str.objectives import (
    build_mixed_batch, finetune_loss, finetune_loss_report, iteration_weights, mixed_batch_loss,
    pretrain_loss,
)
from mvlt_str.tensor import Tensor
from mvlt_str.vision import ImageSample

OFF = LossToggles(False, False, False, False, True)


def images(config, count, seed, label="abc"):
    rng = np.random.default_rng(seed)
    return [ImageSample(rng.uniform(size=config.canvas), label, f"s{i}") for i in range(count)]


@pytest.fixture
def model():
    return MvltModel(micro_model_config(), seed=0)


def batch_for(model, n_labeled=2, n_unlabeled=1, seed=0, unlabeled_label=None):
    cfg = model.config
    labeled = images(cfg, n_labeled, 10, "abc")
    unlabeled = images(cfg, n_unlabeled, 20, unlabeled_label)
    return build_mixed_batch(labeled, unlabeled, cfg, np.random.default_rng(seed), model.charset)


def grads(model, batch, toggles):
    model.store.zero_grad()
    loss, report = mixed_batch_loss(batch, model, toggles)
    loss.backward()
    return {name: p.grad.copy() for name, p in model.store.items()}, report


class TestMixedBatch:
    """Test cases for build_mixed_batch."""

    def test_counts_and_plans(self, model):
        """Test the batch holds N1 labeled and N2 unlabeled rows with plans for each."""
        batch = batch_for(model, 3, 2)
        assert batch.n_labeled == 3 and batch.n_unlabeled == 2
        assert len(batch.patch_plans) == 5
        assert len(batch.explicit_plans) == len(batch.implicit_plans) == 3
        assert batch.patches.shape[0] == 5

    def test_implicit_plans_mask_all_text(self, model):
        """Test the implicit view masks every text position."""
        batch = batch_for(model)
        assert all(plan.unmasked.size == 0 for plan in batch.implicit_plans)

    def test_unlabeled_labels_are_never_read(self, model):
        """Test the batch is identical whatever labels the unlabeled samples carry."""
        a = batch_for(model, unlabeled_label="abc")
        b = batch_for(model, unlabeled_label="eee")
        assert np.array_equal(a.unlabeled_patches, b.unlabeled_patches)
        assert np.array_equal(a.targets, b.targets)
        assert all(np.array_equal(p.masked, q.masked) for p, q in zip(a.patch_plans, b.patch_plans))


class TestPretrainLoss:
    """Test cases for pretrain_loss and mixed_batch_loss."""

    def test_report_has_all_terms(self, model):
        """Test the full objective reports every component."""
        _, report = mixed_batch_loss(batch_for(model), model)
        record = report.as_record()
        assert set(record) == {"L_v1", "L_t1", "L_v2", "L_t2", "L_ur", "total"}
        assert all(value is not None and value >= 0 for value in record.values())

    def test_total_is_weighted_sum(self, model):
        """Test total = alpha*L_v1 + beta*L_v2 + gamma*L_t1 + epsilon*L_t2 + L_ur."""
        cfg = model.config
        _, r = mixed_batch_loss(batch_for(model), model)
        expected = cfg.alpha * r.l_v1 + cfg.beta * r.l_v2 + cfg.gamma * r.l_t1 + cfg.epsilon * r.l_t2 + r.l_ur
        assert r.total == pytest.approx(expected, rel=1e-12)

    def test_weights_pair_pixel_and_text_terms(self, model):
        """Test alpha and beta weight the pixel terms and gamma and epsilon the text terms."""
        batch = batch_for(model, n_unlabeled=0)
        weighted = dataclasses.replace(model.config, alpha=0.1, beta=0.2, gamma=0.3, epsilon=0.4)
        _, r = mixed_batch_loss(batch, model, config=weighted)
        expected = 0.1 * r.l_v1 + 0.2 * r.l_v2 + 0.3 * r.l_t1 + 0.4 * r.l_t2
        assert r.total == pytest.approx(expected, rel=1e-12)

    def test_doubling_gamma_doubles_only_its_term(self, model):
        """Test the text term enters the total linearly in its weight."""
        batch = batch_for(model, n_unlabeled=0)
        _, base = mixed_batch_loss(batch, model)
        doubled = dataclasses.replace(model.config, gamma=2 * model.config.gamma)
        _, more = mixed_batch_loss(batch, model, config=doubled)
        assert more.total - base.total == pytest.approx(model.config.gamma * base.l_t1, rel=1e-9)

    def test_disabled_terms_are_null(self, model):
        """Test visual-only reports None for the text terms."""
        _, report = mixed_batch_loss(batch_for(model, n_unlabeled=0), model, ABLATIONS["visual_only"])
        record = report.as_record()
        assert record["L_t1"] is None and record["L_v2"] is None and record["L_t2"] is None
        assert record["L_ur"] is None
        assert record["L_v1"] is not None

    def test_ablations_give_distinct_schemas(self, model):
        """Test the loss-term null pattern differs across the toggle rows that differ in losses."""
        batch = batch_for(model, n_unlabeled=0)
        patterns = set()
        for name, toggles in ABLATIONS.items():
            _, report = mixed_batch_loss(batch, model, toggles)
            patterns.add(tuple(v is None for v in report.as_record().values()))
        assert len(patterns) == 4

    def test_text_losses_need_labeled_rows(self, model):
        """Test a batch without labeled samples cannot use text losses."""
        batch = batch_for(model, n_labeled=0, n_unlabeled=2)
        with pytest.raises(ConfigError):
            mixed_batch_loss(batch, model)

    def test_unlabeled_only_batch(self, model):
        """Test an unlabeled-only batch trains on reconstruction alone."""
        batch = batch_for(model, n_labeled=0, n_unlabeled=2)
        loss, report = mixed_batch_loss(batch, model, OFF)
        assert report.total == pytest.approx(report.l_ur)
        assert loss.item() > 0

    def test_everything_disabled(self, model):
        """Test a labeled-only batch with every term off is rejected."""
        with pytest.raises(ConfigError):
            mixed_batch_loss(batch_for(model, n_unlabeled=0), model, OFF)

    def test_pretrain_loss_with_nothing_enabled(self, model):
        """Test pretrain_loss returns no total when no outputs are given."""
        total, terms = pretrain_loss(None, None, np.zeros((0, 1, 1)), np.zeros((0, 1)), model.config)
        assert total is None
        assert all(term is None for term in terms.values())


class TestSemiSupervisedIsolation:
    """Test cases for keeping unlabeled samples out of the text losses."""

    def test_char_head_gets_no_gradient_without_text_losses(self, model):
        """Test the character head's gradient is exactly zero on reconstruction-only training."""
        cfg = model.config
        labeled = images(cfg, 8, 1)
        unlabeled = images(cfg, 8, 2, None)
        batch = build_mixed_batch(labeled, unlabeled, cfg, np.random.default_rng(0), model.charset)
        g, _ = grads(model, batch, OFF)
        assert np.all(g["decoder.char_head.weight"] == 0.0)
        assert np.all(g["decoder.char_head.bias"] == 0.0)
        assert np.any(g["decoder.pixel_head.weight"] != 0.0)

    def test_gradients_ignore_unlabeled_would_be_labels(self, model):
        """Test gradients are bitwise identical under any labels on unlabeled images."""
        cfg = model.config
        labeled = images(cfg, 8, 1)
        results = []
        for word in ("abc", "ddd", None):
            unlabeled = images(cfg, 8, 2, word)
            batch = build_mixed_batch(labeled, unlabeled, cfg, np.random.default_rng(0), model.charset)
            results.append(grads(model, batch, LossToggles())[0])
        for other in results[1:]:
            for name in results[0]:
                assert np.array_equal(results[0][name], other[name]), name

    def test_char_head_ignores_unlabeled_pixels(self, model):
        """Test blanking the unlabeled images leaves the character head's gradient bitwise unchanged."""
        cfg = model.config
        labeled = images(cfg, 8, 1)
        unlabeled = images(cfg, 8, 2, None)
        blank = [ImageSample(np.zeros(cfg.canvas), None, s.sample_id) for s in unlabeled]
        results = []
        for rows in (unlabeled, blank):
            batch = build_mixed_batch(labeled, rows, cfg, np.random.default_rng(0), model.charset)
            results.append(grads(model, batch, LossToggles())[0])
        for name in ("decoder.char_head.weight", "decoder.char_head.bias"):
            assert np.array_equal(results[0][name], results[1][name]), name
        assert not np.array_equal(results[0]["decoder.pixel_head.weight"], results[1]["decoder.pixel_head.weight"])


class TestCrossModalGradient:
    """Test cases for gradient flow from the text branch into the encoder."""

    def test_explicit_text_loss_reaches_the_encoder(self, model):
        """Test L_t1 alone gives nonzero gradients to every encoder block."""
        batch = batch_for(model, n_labeled=2, n_unlabeled=0)
        g, report = grads(model, batch, LossToggles(False, True, False, False, True))
        assert report.l_t1 is not None and report.l_v1 is None
        assert np.any(g["encoder.patch_embed.weight"] != 0.0)
        for i in range(model.config.enc_depth):
            assert np.any(g[f"encoder.blocks.{i}.mlp.fc1.weight"] != 0.0), i
        assert np.all(g["decoder.pixel_head.weight"] == 0.0)


class TestFinetuneLoss:
    """Test cases for iteration weights and the fine-tuning loss."""

    def test_weights_for_three_iterations(self):
        """Test K=3 gives 1/2 then 1/4 on each later iteration."""
        assert iteration_weights(3) == [0.5, 0.25, 0.25, 0.25]

    def test_equal_terms_scale_by_one_and_a_quarter(self):
        """Test K=3 with identical logits gives 1.25 times the single cross-entropy."""
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 4, 6))
        targets = rng.integers(0, 6, size=(2, 4))
        ce = finetune_loss([Tensor(logits)], targets, 0).item()
        total = finetune_loss([Tensor(logits) for _ in range(4)], targets, 3).item()
        assert abs(total - 1.25 * ce) <= 1e-12

    def test_k_zero_is_plain_cross_entropy(self):
        """Test K=0 uses weight 1 on the single iteration."""
        assert iteration_weights(0) == [1.0]

    def test_k_one_is_undefined_for_default_variant(self):
        """Test the default variant rejects K=1."""
        with pytest.raises(ConfigError, match="K=1"):
            iteration_weights(1)

    def test_mean_variant_sums_to_one(self):
        """Test the mean variant weights sum to one for any K >= 1."""
        for k in range(1, 6):
            assert sum(iteration_weights(k, "mean")) == pytest.approx(1.0)

    def test_paper_alias_matches_default(self):
        """Test 'paper' selects the same as-printed weights as the default."""
        assert iteration_weights(3, "paper") == iteration_weights(3) == [0.5, 0.25, 0.25, 0.25]
        with pytest.raises(ConfigError, match="K=1"):
            iteration_weights(1, "paper")

    def test_unknown_variant(self):
        """Test an unknown variant name is a config error."""
        with pytest.raises(ConfigError):
            iteration_weights(2, "median")

    def test_logit_count_must_match(self):
        """Test passing the wrong number of logits is a contract error."""
        with pytest.raises(ContractError):
            finetune_loss_report([Tensor(np.zeros((1, 2, 3)))], np.zeros((1, 2), dtype=np.int64), 2)

    def test_report_lists_each_iteration(self):
        """Test the report carries one cross-entropy per iteration."""
        logits = [Tensor(np.zeros((1, 2, 3))) for _ in range(3)]
        _, report = finetune_loss_report(logits, np.zeros((1, 2), dtype=np.int64), 2)
        assert len(report.ce_per_iteration) == 3
        assert report.ce_per_iteration[0] == pytest.approx(np.log(3.0))
