"""
Two-stage training: masked pretraining and fine-tuning with iterative correction.

Each step draws its batch from a counter-based generator seeded with
``(seed, step)``, so a run resumed from a checkpoint replays exactly the
batches the uninterrupted run would have seen.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .datagen import ImageDataset
from .errors import CheckpointError, ConfigError, ManifestError, NumericError
from .model import MvltModel
from .objectives import build_mixed_batch, finetune_loss_report, mixed_batch_loss
from .optim import AdamWState, adamw_step, clip_global_norm, layer_decay_scales, lr_at
from .tensor import Tensor
from .text import encode_label
from .utils import ProgressTracker, append_jsonl, error_context
from .vision import ImageSample, patchify_batch, random_resized_crop, random_rotation


logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    model: MvltModel
    records: List[Dict[str, Any]] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None
    optimizer: Optional[AdamWState] = None


class Trainer:
    """Runs one stage over a model; ``stage`` in the config picks the objective."""

    def __init__(self, model: MvltModel, config: TrainConfig, labeled: ImageDataset,
                 unlabeled: Optional[ImageDataset] = None, run_dir: Optional[Union[str, Path]] = None,
                 optimizer: Optional[AdamWState] = None, start_step: int = 0):
        if not labeled.labeled:
            raise ManifestError(f"training data at {labeled.manifest.root} is unlabeled")
        if unlabeled is not None and unlabeled.labeled:
            logger.warning("Unlabeled dataset carries labels; they will not be read")
        if config.stage == "pretrain" and config.batch_unlabeled and unlabeled is None:
            raise ConfigError("batch_unlabeled > 0 needs an unlabeled dataset")
        if not 0 <= start_step <= config.steps:
            raise ConfigError(f"start step {start_step} outside [0, {config.steps}]")

        self.model = model
        self.config = config
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.schedule = config.schedule()
        self.optimizer = optimizer or AdamWState.for_store(model.store)
        self.start_step = start_step
        self.lr_scales = (
            layer_decay_scales(model.store.names(), model.config.enc_depth, config.layer_decay)
            if config.layer_decay else None
        )
        self.log_path = self.run_dir / f"{config.stage}_log.jsonl" if self.run_dir else None

    def step_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, step])

    def _draw(self, dataset: ImageDataset, count: int, rng: np.random.Generator) -> List[ImageSample]:
        indices = rng.integers(0, len(dataset), size=count)
        return [dataset.sample(int(i)) for i in indices]

    def _augment(self, samples: List[ImageSample], rng: np.random.Generator) -> List[ImageSample]:
        if not self.config.augment:
            return samples
        if self.config.stage == "pretrain":
            return [random_resized_crop(s, rng) for s in samples]
        return [random_rotation(s, rng) for s in samples]

    def _pretrain_loss(self, step: int) -> Tuple[Tensor, Dict[str, Any]]:
        rng = self.step_rng(step)
        labeled = self._augment(self._draw(self.labeled, self.config.batch_labeled, rng), rng)
        unlabeled: List[ImageSample] = []
        if self.unlabeled is not None and self.config.batch_unlabeled:
            unlabeled = self._augment(self._draw(self.unlabeled, self.config.batch_unlabeled, rng), rng)
        batch = build_mixed_batch(labeled, unlabeled, self.model.config, rng, self.model.charset)
        loss, report = mixed_batch_loss(batch, self.model, self.config.toggles)
        return loss, report.as_record()

    def _finetune_loss(self, step: int) -> Tuple[Tensor, Dict[str, Any]]:
        rng = self.step_rng(step)
        samples = self._augment(self._draw(self.labeled, self.config.batch_labeled, rng), rng)
        cfg = self.model.config
        targets = np.stack([encode_label(s.label, self.model.charset, cfg.max_len).indices for s in samples])
        encoded = self.model.encode_full(patchify_batch(samples, cfg.patch_size))
        iterations = self.config.effective_iterations
        logits = self.model.iterative_correct(encoded, iterations)
        loss, report = finetune_loss_report(logits, targets, iterations, self.config.finetune_loss_variant)
        return loss, report.as_record()

    def train_step(self, step: int) -> Dict[str, Any]:
        """Forward, backward, optional clipping and one AdamW update."""
        store = self.model.store
        store.zero_grad()
        if self.config.stage == "pretrain":
            loss, record = self._pretrain_loss(step)
        else:
            loss, record = self._finetune_loss(step)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite loss {loss.item()} at step {step}")
        loss.backward()

        if self.config.grad_clip:
            record["grad_scale"] = clip_global_norm(store, self.config.grad_clip)
        lr = lr_at(step, self.schedule)
        adamw_step(store, self.optimizer, lr, self.schedule, self.lr_scales)
        return {"step": step, **record, "lr": lr}

    def rng_state(self, next_step: int) -> Dict[str, Any]:
        state: Dict[str, Any] = {"seed": self.config.seed, "next_step": next_step, "stage": self.config.stage}
        if self.config.stage == "finetune":
            state["iterations"] = self.config.effective_iterations
        return state

    def save(self, path: Union[str, Path], completed_step: int) -> Path:
        return save_checkpoint(path, self.model, self.optimizer, self.rng_state(completed_step + 1),
                               completed_step)

    def run(self) -> TrainingResult:
        cfg = self.config
        logger.info(
            f"Starting {cfg.stage}: steps {self.start_step}..{cfg.steps - 1}, "
            f"batch {cfg.batch_labeled}+{cfg.batch_unlabeled if cfg.stage == 'pretrain' else 0}, "
            f"lr {cfg.base_lr}, toggles {cfg.toggles}"
        )
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

        result = TrainingResult(self.model, optimizer=self.optimizer)
        progress = ProgressTracker(total=cfg.steps - self.start_step, description=f"{cfg.stage} steps")
        for step in range(self.start_step, cfg.steps):
            with error_context(f"{cfg.stage} step {step}", logger):
                record = self.train_step(step)
            result.records.append(record)
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                logger.info(f"{cfg.stage} step {step}: total={record['total']:.6f} lr={record['lr']:.3e}")
                if self.log_path is not None:
                    append_jsonl(self.log_path, record)
            if self.run_dir is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                self.save(self.run_dir / f"{cfg.stage}_step{step:06d}.ckpt", step)
            progress.update(note=f"total={record['total']:.4f}")
        progress.finish()

        if self.run_dir is not None and cfg.steps > self.start_step:
            result.final_checkpoint = self.save(self.run_dir / f"{cfg.stage}_final.ckpt", cfg.steps - 1)
        return result


def resume_state(checkpoint: Checkpoint, config: TrainConfig) -> Tuple[AdamWState, int]:
    """Optimizer state and first step to run when continuing from ``checkpoint``."""
    if checkpoint.optimizer is None:
        raise CheckpointError("checkpoint has no optimizer state to resume from")
    stage = checkpoint.rng_state.get("stage")
    if stage is not None and stage != config.stage:
        raise ConfigError(f"cannot resume {config.stage} from a {stage} checkpoint")
    seed = checkpoint.rng_state.get("seed")
    if seed is not None and seed != config.seed:
        logger.warning(f"Run seed {config.seed} differs from checkpoint seed {seed}; batches will differ")
    next_step = int(checkpoint.rng_state.get("next_step", checkpoint.step + 1))
    return checkpoint.optimizer, next_step


def pretrain(model: MvltModel, labeled: ImageDataset, config: TrainConfig,
             unlabeled: Optional[ImageDataset] = None, run_dir: Optional[Union[str, Path]] = None,
             resume_from: Optional[Checkpoint] = None) -> TrainingResult:
    if config.stage != "pretrain":
        raise ConfigError(f"pretrain() needs a pretrain config, got stage {config.stage!r}")
    optimizer, start = None, 0
    if resume_from is not None:
        optimizer, start = resume_state(resume_from, config)
        model.store.load_arrays(resume_from.tensors)
    return Trainer(model, config, labeled, unlabeled, run_dir, optimizer, start).run()


def finetune(model: MvltModel, labeled: ImageDataset, config: TrainConfig,
             run_dir: Optional[Union[str, Path]] = None,
             resume_from: Optional[Checkpoint] = None) -> TrainingResult:
    if config.stage != "finetune":
        raise ConfigError(f"finetune() needs a finetune config, got stage {config.stage!r}")
    optimizer, start = None, 0
    if resume_from is not None:
        optimizer, start = resume_state(resume_from, config)
        model.store.load_arrays(resume_from.tensors)
    return Trainer(model, config, labeled, None, run_dir, optimizer, start).run()
