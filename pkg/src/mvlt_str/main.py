"""
Main module for the MVLT scene-text recognition toolkit.

Dispatches the command-line commands to data generation, training,
evaluation, prediction, reconstruction and gradient checking.
"""

import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .checkpoint import load_checkpoint, restore_model
from .config import CliSettings, ConfigManager, RunConfig
from .datagen import ImageDataset, RandomWordSource, WordListSource, load_manifest, make_dataset, strip_labels
from .errors import EXIT_OK, ConfigError, MvltError
from .evaluator import evaluate, load_image, predict_image, reconstruct
from .gradcheck import check_or_raise, run_gradcheck
from .model import MvltModel
from .report_exporter import ReportExporter
from .text import Charset
from .trainer import finetune, pretrain
from .utils import error_context, setup_logging


logger = logging.getLogger(__name__)


class MvltApplication:
    """Runs one command of the toolkit."""

    def __init__(self, settings: CliSettings):
        self.settings = settings
        self.args = settings.args
        self.run_config: RunConfig = settings.run
        self.trained_iterations: Optional[int] = None

    def run(self) -> int:
        handler = getattr(self, "cmd_" + self.settings.command.replace("-", "_"))
        logger.info(f"Command: {self.settings.command} (seed {self.run_config.seed})")
        with error_context(self.settings.command, logger):
            handler()
        return EXIT_OK

    def _model_for_checkpoint(self, path: str) -> MvltModel:
        checkpoint = load_checkpoint(path)
        model = restore_model(checkpoint)
        self.trained_iterations = checkpoint.trained_iterations
        logger.info(f"✓ Loaded {path}: {model.num_parameters()} parameters, config {model.config.config_hash()}")
        return model

    def _iterations(self, model: MvltModel) -> int:
        iterations = self.args.iterations
        if iterations is None:
            if self.trained_iterations is not None:
                return self.trained_iterations
            return model.config.iterations
        if iterations < 0:
            raise ConfigError(f"--iterations must be non-negative, got {iterations}")
        return iterations

    def cmd_gen_data(self) -> None:
        args = self.args
        if args.strip_from:
            manifest = strip_labels(load_manifest(args.strip_from, require_labels=True), args.out)
            logger.info(f"✓ Copied {len(manifest)} images without labels to {args.out}")
            return
        model_cfg = self.run_config.model
        charset = Charset(model_cfg.charset)
        if args.word_list:
            source = WordListSource.from_file(args.word_list)
        else:
            # one slot stays free for the EOS target
            source = RandomWordSource(charset).clamped(model_cfg.max_len - 1)
        manifest = make_dataset(
            n=args.n,
            seed=self.run_config.seed,
            word_source=source,
            out_dir=args.out,
            labeled=not args.unlabeled,
            canvas=model_cfg.canvas,
            charset=charset,
            start_index=args.start_index,
            noise_level=args.noise_level,
            workers=args.workers,
        )
        logger.info(f"✓ Wrote {len(manifest)} {'labeled' if manifest.labeled else 'unlabeled'} images to {args.out}")

    def cmd_pretrain(self) -> None:
        args = self.args
        config = self.run_config.pretrain
        resume = load_checkpoint(args.resume) if args.resume else None
        model = restore_model(resume) if resume else MvltModel(self.run_config.model, seed=self.run_config.seed)
        labeled = ImageDataset(load_manifest(args.data, require_labels=True), model.config.canvas)
        unlabeled = None
        if args.unlabeled_data:
            unlabeled = ImageDataset(load_manifest(args.unlabeled_data), model.config.canvas)
        elif config.batch_unlabeled:
            logger.warning("No --unlabeled-data given; training without the unlabeled reconstruction loss")
            config = dataclasses.replace(config, batch_unlabeled=0)
        result = pretrain(model, labeled, config, unlabeled, args.run_dir, resume)
        self._log_result(result.final_checkpoint, result.records)

    def cmd_finetune(self) -> None:
        args = self.args
        config = self.run_config.finetune
        if args.resume and args.init:
            raise ConfigError("--resume and --init are mutually exclusive")
        resume = load_checkpoint(args.resume) if args.resume else None
        if resume is not None:
            model = restore_model(resume)
        elif args.init:
            model = self._model_for_checkpoint(args.init)
        else:
            logger.warning("Fine-tuning from random weights; pass --init with a pretraining checkpoint")
            model = MvltModel(self.run_config.model, seed=self.run_config.seed)
        labeled = ImageDataset(load_manifest(args.data, require_labels=True), model.config.canvas)
        result = finetune(model, labeled, config, args.run_dir, resume)
        self._log_result(result.final_checkpoint, result.records)

    def _log_result(self, checkpoint: Optional[Path], records: List[dict]) -> None:
        if records:
            logger.info(f"✓ Final loss {records[-1]['total']:.6f} after {len(records)} steps")
        if checkpoint is not None:
            logger.info(f"✓ Final checkpoint: {checkpoint}")

    def cmd_eval(self) -> None:
        args = self.args
        model = self._model_for_checkpoint(args.checkpoint)
        dataset = ImageDataset(load_manifest(args.data, require_labels=True), model.config.canvas)
        report = evaluate(model, dataset, self._iterations(model), args.batch_size, args.limit)
        if args.out:
            ReportExporter(args.out, Path(args.checkpoint).name).export(report)
        print(json.dumps(report.to_dict(with_predictions=False), indent=2, sort_keys=True))

    def cmd_predict(self) -> None:
        model = self._model_for_checkpoint(self.args.checkpoint)
        words = predict_image(model, load_image(self.args.image), self._iterations(model))
        for k, word in enumerate(words):
            print(f"iteration {k}: {word}")
        print(words[-1])

    def cmd_reconstruct(self) -> None:
        args = self.args
        model = self._model_for_checkpoint(args.checkpoint)
        written = reconstruct(model, load_image(args.image), args.out, seed=self.run_config.seed, label=args.label)
        for name, path in written.items():
            print(f"{name}: {path}")

    def cmd_gradcheck(self) -> None:
        args = self.args
        result = run_gradcheck(seed=self.run_config.seed, step_size=args.step_size, tolerance=args.tolerance)
        print(
            f"max relative error {result.max_rel_error:.3e} at {result.worst_parameter}"
            f"{list(result.worst_index)} over {result.checked} parameters"
        )
        check_or_raise(result)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application."""
    try:
        settings = ConfigManager().load_config(argv)
        if settings.dump_config:
            print(json.dumps(settings.run.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK

        run_name = settings.command if settings.command in ("pretrain", "finetune") else None
        setup_logging(level=settings.log_level, run_name=run_name, log_dir=settings.log_dir)
        logger.info(f"MVLT scene-text toolkit v{__version__}")
        return MvltApplication(settings).run()

    except KeyboardInterrupt:
        logger.warning("Application interrupted by user")
        return 130

    except MvltError as e:
        logger.error(f"{type(e).__name__}: {e}")
        logger.debug("Full error details:", exc_info=True)
        return e.exit_code

    except Exception as e:
        logger.error(f"Application failed: {str(e)}")
        logger.debug("Full error details:", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
