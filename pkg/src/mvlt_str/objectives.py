"""
Loss computations for pretraining, fine-tuning and unlabeled reconstruction.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import LossToggles, ModelConfig, loss_variant
from .errors import ConfigError, ContractError, ShapeError
from .model import DecoderOutput, MvltModel
from .tensor import Tensor, cross_entropy, mse
from .text import (
    Charset, TextMaskPlan, encode_label, masked_input_ids, sample_text_mask, text_input_ids,
)
from .vision import ImageSample, PatchMaskPlan, patchify_batch, sample_patch_mask


logger = logging.getLogger(__name__)


@dataclass
class PretrainLossReport:
    """Component losses of one step; disabled terms are None."""

    l_v1: Optional[float]
    l_t1: Optional[float]
    l_v2: Optional[float]
    l_t2: Optional[float]
    l_ur: Optional[float]
    total: float

    def as_record(self) -> Dict[str, Any]:
        return {
            "L_v1": self.l_v1,
            "L_t1": self.l_t1,
            "L_v2": self.l_v2,
            "L_t2": self.l_t2,
            "L_ur": self.l_ur,
            "total": self.total,
        }


@dataclass
class FinetuneLossReport:
    ce_per_iteration: List[float]
    total: float

    def as_record(self) -> Dict[str, Any]:
        return {"L_ft": self.total, "ce_per_iteration": self.ce_per_iteration, "total": self.total}


@dataclass
class MixedBatch:
    """
    N1 labeled samples followed by N2 unlabeled ones.

    Every sample has a patch mask plan; labeled samples also carry their
    targets and one text plan per decoder view.
    """

    labeled_patches: np.ndarray
    targets: np.ndarray
    word_lengths: np.ndarray
    patch_plans: List[PatchMaskPlan]
    explicit_plans: List[TextMaskPlan]
    implicit_plans: List[TextMaskPlan]
    unlabeled_patches: np.ndarray

    def __post_init__(self):
        n1, n2 = self.labeled_patches.shape[0], self.unlabeled_patches.shape[0]
        if self.targets.shape[0] != n1 or self.word_lengths.shape[0] != n1:
            raise ShapeError(f"{n1} labeled images but {self.targets.shape[0]} target rows")
        if len(self.explicit_plans) != n1 or len(self.implicit_plans) != n1:
            raise ShapeError("each labeled sample needs one text plan per decoder view")
        if len(self.patch_plans) != n1 + n2:
            raise ShapeError(f"{len(self.patch_plans)} patch plans for {n1 + n2} samples")

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_patches.shape[0])

    @property
    def n_unlabeled(self) -> int:
        return int(self.unlabeled_patches.shape[0])

    @property
    def patches(self) -> np.ndarray:
        return np.concatenate([self.labeled_patches, self.unlabeled_patches], axis=0)


def build_mixed_batch(labeled: Sequence[ImageSample], unlabeled: Sequence[ImageSample],
                      config: ModelConfig, rng: np.random.Generator,
                      charset: Optional[Charset] = None) -> MixedBatch:
    """Patchify, encode labels and draw all mask plans. Labels of ``unlabeled`` are never read."""
    charset = charset or Charset(config.charset)
    patch_shape = (0, config.num_patches, config.patch_dim)
    labeled_patches = patchify_batch(labeled, config.patch_size) if labeled else np.zeros(patch_shape)
    unlabeled_patches = patchify_batch(unlabeled, config.patch_size) if unlabeled else np.zeros(patch_shape)

    targets = np.zeros((len(labeled), config.max_len), dtype=np.int64)
    lengths = np.zeros(len(labeled), dtype=np.int64)
    for i, sample in enumerate(labeled):
        if sample.label is None:
            raise ShapeError(f"sample {sample.sample_id} has no label")
        encoded = encode_label(sample.label, charset, config.max_len)
        targets[i] = encoded.indices
        lengths[i] = encoded.word_length

    patch_plans = [
        sample_patch_mask(config.num_patches, config.patch_mask_ratio, rng)
        for _ in range(len(labeled) + len(unlabeled))
    ]
    explicit = [sample_text_mask(int(n), config.text_mask_ratio_explicit, config.max_len, rng) for n in lengths]
    implicit = [sample_text_mask(int(n), config.text_mask_ratio_implicit, config.max_len, rng) for n in lengths]
    return MixedBatch(labeled_patches, targets, lengths, patch_plans, explicit, implicit, unlabeled_patches)


def masked_patch_targets(patches: np.ndarray, plans: Sequence[PatchMaskPlan]) -> np.ndarray:
    ids = np.stack([plan.masked for plan in plans])
    return patches[np.arange(patches.shape[0])[:, None], ids]


def masked_mse(pred_masked: Tensor, target_masked: np.ndarray) -> Tensor:
    """MSE over masked-patch pixels only."""
    return mse(pred_masked, Tensor(target_masked))


def unlabeled_loss(pred_masked: Tensor, target_masked: np.ndarray) -> Tensor:
    """Reconstruction-only loss of unlabeled samples; they have no text term."""
    return masked_mse(pred_masked, target_masked)


def masked_text_ce(output: DecoderOutput, targets: np.ndarray) -> Tensor:
    """Cross-entropy over each sample's masked text positions, averaged over samples."""
    return cross_entropy(output.logits, targets, weights=output.masked_text_weights())


def pretrain_loss(decoded_1: Optional[DecoderOutput], decoded_2: Optional[DecoderOutput],
                  patches: np.ndarray, targets: np.ndarray, config: ModelConfig,
                  toggles: LossToggles = LossToggles()) -> Tuple[Optional[Tensor], Dict[str, Optional[Tensor]]]:
    """
    Weighted sum ``alpha*L_v1 + beta*L_v2 + gamma*L_t1 + epsilon*L_t2`` over enabled terms.

    Both outputs must cover the same labeled rows as ``patches`` and ``targets``.
    Returns the total (None if nothing is enabled) and the component tensors.
    """
    terms: Dict[str, Optional[Tensor]] = {"L_v1": None, "L_t1": None, "L_v2": None, "L_t2": None}
    if decoded_1 is not None:
        if toggles.use_lv1:
            terms["L_v1"] = masked_mse(decoded_1.masked_pixels(), masked_patch_targets(patches, decoded_1.patch_plans))
        if toggles.use_lt1:
            terms["L_t1"] = masked_text_ce(decoded_1, targets)
    if decoded_2 is not None:
        if toggles.use_lv2:
            terms["L_v2"] = masked_mse(decoded_2.masked_pixels(), masked_patch_targets(patches, decoded_2.patch_plans))
        if toggles.use_lt2:
            terms["L_t2"] = masked_text_ce(decoded_2, targets)

    weighted = [
        (config.alpha, terms["L_v1"]),
        (config.beta, terms["L_v2"]),
        (config.gamma, terms["L_t1"]),
        (config.epsilon, terms["L_t2"]),
    ]
    total: Optional[Tensor] = None
    for weight, term in weighted:
        if term is None:
            continue
        contribution = term * weight
        total = contribution if total is None else total + contribution
    return total, terms


def _value(term: Optional[Tensor]) -> Optional[float]:
    return None if term is None else term.item()


def mixed_batch_loss(batch: MixedBatch, model: MvltModel,
                     toggles: LossToggles = LossToggles(),
                     config: Optional[ModelConfig] = None) -> Tuple[Tensor, PretrainLossReport]:
    """
    One pretraining objective over labeled and unlabeled samples.

    The encoder runs once on the concatenated batch. The explicit view
    decodes the labeled rows; the implicit view decodes labeled rows (for
    L_v2, L_t2) and unlabeled rows (for L_ur), whose text input is all MASK.
    """
    config = config or model.config
    n1, n2 = batch.n_labeled, batch.n_unlabeled
    if n1 == 0 and toggles.any_text:
        raise ConfigError("text losses are enabled but the batch has no labeled samples")
    charset = model.charset
    max_len = config.max_len

    patches = batch.patches
    encoded = model.encode_masked(patches, batch.patch_plans)

    decoded_1 = None
    if n1 and (toggles.use_lv1 or toggles.use_lt1):
        ids = np.stack([
            text_input_ids(batch.targets[i], plan, charset) for i, plan in enumerate(batch.explicit_plans)
        ])
        decoded_1 = model.decoder_1.decode(encoded[:n1], batch.patch_plans[:n1], ids, batch.explicit_plans,
                                           with_pixels=toggles.use_lv1)

    need_labeled_2 = bool(n1) and (toggles.use_lv2 or toggles.use_lt2)
    need_unlabeled = n2 > 0
    decoded_2_labeled = decoded_2_unlabeled = None
    if need_labeled_2 or need_unlabeled:
        start = 0 if need_labeled_2 else n1
        stop = n1 + n2 if need_unlabeled else n1
        plans = batch.implicit_plans + [TextMaskPlan.all_masked(max_len)] * n2
        text_plans = plans[start:stop]
        with_pixels = need_unlabeled or toggles.use_lv2
        decoded_2 = model.decoder_2.decode(encoded[start:stop], batch.patch_plans[start:stop],
                                           masked_input_ids(stop - start, max_len, charset), text_plans,
                                           with_pixels=with_pixels)
        if need_labeled_2:
            decoded_2_labeled = decoded_2.rows(0, n1)
        if need_unlabeled:
            decoded_2_unlabeled = decoded_2.rows(n1 - start, stop - start)

    supervised, terms = pretrain_loss(decoded_1, decoded_2_labeled, batch.labeled_patches, batch.targets,
                                      config, toggles)
    l_ur = None
    if decoded_2_unlabeled is not None:
        l_ur = unlabeled_loss(
            decoded_2_unlabeled.masked_pixels(),
            masked_patch_targets(batch.unlabeled_patches, batch.patch_plans[n1:]),
        )

    if supervised is None and l_ur is None:
        raise ConfigError("every loss term is disabled for this batch")
    if supervised is None:
        total = l_ur
    elif l_ur is None:
        total = supervised
    else:
        total = supervised + l_ur

    report = PretrainLossReport(
        l_v1=_value(terms["L_v1"]),
        l_t1=_value(terms["L_t1"]),
        l_v2=_value(terms["L_v2"]),
        l_t2=_value(terms["L_t2"]),
        l_ur=_value(l_ur),
        total=total.item(),
    )
    return total, report


def iteration_weights(iterations: int, variant: str = "halved") -> List[float]:
    """
    Weights on the cross-entropy of iterations 0..K.

    ``halved`` (alias ``paper``): 1/2 on iteration 0 and 1/(2(K-1)) on each later
    one, K=1 undefined. ``mean``: 1/2 and 1/(2K). K=0 is plain cross-entropy.
    """
    if iterations < 0:
        raise ConfigError(f"iteration count must be non-negative, got {iterations}")
    variant = loss_variant(variant)
    if iterations == 0:
        return [1.0]
    if variant == "halved":
        if iterations == 1:
            raise ConfigError("the halved loss variant is undefined for K=1 (divisor 2(K-1) is zero)")
        later = 1.0 / (2.0 * (iterations - 1))
    elif variant == "mean":
        later = 1.0 / (2.0 * iterations)
    else:
        raise ConfigError(f"unknown fine-tuning loss variant {variant!r}")
    return [0.5] + [later] * iterations


def finetune_loss_report(logits: Sequence[Tensor], targets: np.ndarray, iterations: int,
                         variant: str = "halved") -> Tuple[Tensor, FinetuneLossReport]:
    if len(logits) != iterations + 1:
        raise ContractError(f"expected {iterations + 1} logit tensors for K={iterations}, got {len(logits)}")
    weights = iteration_weights(iterations, variant)
    terms = [cross_entropy(step_logits, targets) for step_logits in logits]
    total: Optional[Tensor] = None
    for weight, term in zip(weights, terms):
        contribution = term if weight == 1.0 else term * weight
        total = contribution if total is None else total + contribution
    return total, FinetuneLossReport([term.item() for term in terms], total.item())


def finetune_loss(logits: Sequence[Tensor], targets: np.ndarray, iterations: int,
                  variant: str = "halved") -> Tensor:
    return finetune_loss_report(logits, targets, iterations, variant)[0]
