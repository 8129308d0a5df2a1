"""
Evaluation, single-image prediction and reconstruction dumps.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .datagen import ImageDataset, image_extension, read_image, write_image
from .errors import ManifestError, ShapeError
from .model import MvltModel
from .tensor import no_grad
from .text import (
    TextMaskPlan, char_matches, decode_prediction, encode_label, masked_input_ids, sample_text_mask,
    text_input_ids,
)
from .utils import ProgressTracker, iter_batches, write_json
from .vision import ImageSample, PatchSequence, patchify, patchify_batch, sample_patch_mask, unpatchify


logger = logging.getLogger(__name__)


@dataclass
class PredictionRecord:
    sample_id: str
    label: str
    predictions: List[str]

    @property
    def final(self) -> str:
        return self.predictions[-1]

    @property
    def correct(self) -> bool:
        return self.final == self.label


@dataclass
class EvalReport:
    """Accuracies of one checkpoint on one labeled set."""

    word_accuracy: float
    char_accuracy: float
    sample_count: int
    iteration_accuracy: List[float]
    config_hash: str
    iterations: int
    predictions: List[PredictionRecord] = field(default_factory=list)

    def to_dict(self, with_predictions: bool = True) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "word_accuracy": self.word_accuracy,
            "char_accuracy": self.char_accuracy,
            "sample_count": self.sample_count,
            "iteration_accuracy": list(self.iteration_accuracy),
            "config_hash": self.config_hash,
            "iterations": self.iterations,
        }
        if with_predictions:
            data["predictions"] = [
                {**asdict(p), "correct": p.correct} for p in self.predictions
            ]
        return data


def predict_batch(model: MvltModel, images: List[ImageSample], iterations: int) -> List[List[str]]:
    """Decoded words of iterations 0..K for each image."""
    patches = patchify_batch(images, model.config.patch_size)
    with no_grad():
        encoded = model.encode_full(patches)
        logits = model.iterative_correct(encoded, iterations)
    return [
        [decode_prediction(step_logits.data[b], model.charset) for step_logits in logits]
        for b in range(len(images))
    ]


def _check_image(model: MvltModel, image: ImageSample) -> None:
    expected = model.config.canvas
    if image.pixels.shape != expected:
        raise ShapeError(f"image has shape {image.pixels.shape}, model expects {expected} (H, W, C)")


def evaluate(model: MvltModel, dataset: ImageDataset, iterations: int, batch_size: int = 32,
             limit: Optional[int] = None) -> EvalReport:
    if not dataset.labeled:
        raise ManifestError(f"dataset at {dataset.manifest.root} is unlabeled; it cannot be evaluated")
    count = len(dataset) if limit is None else min(limit, len(dataset))
    progress = ProgressTracker(total=count, description="Evaluating samples")
    records: List[PredictionRecord] = []
    for indices in iter_batches(range(count), batch_size):
        images = [dataset.sample(i) for i in indices]
        for image in images:
            _check_image(model, image)
        for image, words in zip(images, predict_batch(model, images, iterations)):
            records.append(PredictionRecord(image.sample_id, model.charset.normalize(image.label), words))
        progress.update(len(indices))
    progress.finish()

    per_iteration = [
        sum(1 for r in records if r.predictions[k] == r.label) / max(1, len(records))
        for k in range(iterations + 1)
    ]
    total_chars = sum(len(r.label) for r in records)
    matched = sum(char_matches(r.final, r.label) for r in records)
    report = EvalReport(
        word_accuracy=per_iteration[-1],
        char_accuracy=matched / max(1, total_chars),
        sample_count=len(records),
        iteration_accuracy=per_iteration,
        config_hash=model.config.config_hash(),
        iterations=iterations,
        predictions=records,
    )
    logger.info(
        f"✓ Evaluated {report.sample_count} samples: word accuracy {report.word_accuracy:.4f}, "
        f"char accuracy {report.char_accuracy:.4f}"
    )
    return report


def load_image(path: Union[str, Path]) -> ImageSample:
    return ImageSample(read_image(path), None, Path(path).stem)


def predict_image(model: MvltModel, image: ImageSample, iterations: int) -> List[str]:
    _check_image(model, image)
    return predict_batch(model, [image], iterations)[0]


def reconstruct(model: MvltModel, image: ImageSample, out_dir: Union[str, Path], seed: int = 0,
                label: Optional[str] = None) -> Dict[str, Path]:
    """
    Write the masked input, both decoders' reconstructions and the original.

    Reconstructions keep the original pixels at visible patches and use the
    predicted ones at masked patches. Without a label the explicit decoder
    sees all-MASK text, like the implicit one.
    """
    _check_image(model, image)
    cfg = model.config
    rng = np.random.default_rng(seed)
    sequence = patchify(image, cfg.patch_size)
    plan = sample_patch_mask(cfg.num_patches, cfg.patch_mask_ratio, rng)

    if label is not None:
        targets = encode_label(label, model.charset, cfg.max_len)
        explicit_plan = sample_text_mask(targets.word_length, cfg.text_mask_ratio_explicit, cfg.max_len, rng)
        explicit_ids = text_input_ids(targets.indices, explicit_plan, model.charset)[None]
    else:
        logger.warning("No label given; the explicit decoder sees an all-MASK text input")
        explicit_plan = TextMaskPlan.all_masked(cfg.max_len)
        explicit_ids = masked_input_ids(1, cfg.max_len, model.charset)

    with no_grad():
        encoded = model.encode_masked(sequence.patches[None], [plan])
        out_1 = model.decoder_1.decode(encoded, [plan], explicit_ids, [explicit_plan])
        out_2 = model.decoder_2.decode(encoded, [plan], masked_input_ids(1, cfg.max_len, model.charset),
                                       [TextMaskPlan.all_masked(cfg.max_len)])

    def compose(predicted: np.ndarray) -> np.ndarray:
        patches = sequence.patches.copy()
        patches[plan.masked] = predicted[plan.masked]
        return unpatchify(PatchSequence(patches, sequence.grid, sequence.patch_size, sequence.channels)).pixels

    masked = sequence.patches.copy()
    masked[plan.masked] = 0.0
    panels = {
        "masked": unpatchify(PatchSequence(masked, sequence.grid, sequence.patch_size, sequence.channels)).pixels,
        "decoder1": compose(out_1.pixels.data[0]),
        "decoder2": compose(out_2.pixels.data[0]),
        "ground_truth": image.pixels,
    }
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ext = image_extension(cfg.channels)
    written: Dict[str, Path] = {}
    for name, pixels in panels.items():
        path = root / f"{name}{ext}"
        write_image(path, pixels)
        written[name] = path
    written["predictions"] = write_json(root / "predictions.json", {
        "decoder_1": decode_prediction(out_1.logits.data[0], model.charset),
        "decoder_2": decode_prediction(out_2.logits.data[0], model.charset),
        "label": label,
        "masked_patches": int(plan.masked.size),
    })
    logger.info(f"✓ Wrote reconstruction panels to {root}")
    return written
