"""
Configuration management for the MVLT toolkit.

Handles model and training presets, JSON run configs, --set overrides,
environment variables and command-line arguments.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .errors import ConfigError, EXIT_USAGE
from .optim import LrSchedule
from .utils import stable_hash


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("pretrain", "finetune")
LOSS_VARIANTS = ("halved", "mean")
# "paper" names the as-printed weighting, which is what "halved" computes
LOSS_VARIANT_ALIASES = {"paper": "halved"}
LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
ITERATIONS_HELP = "Iterative correction count K (default: the K stored by fine-tuning, else model.iterations)"


def loss_variant(name: str) -> str:
    """Canonical fine-tuning loss variant for ``name`` or one of its aliases."""
    if not isinstance(name, str):
        raise ConfigError(f"finetune_loss_variant must be a string, got {name!r}")
    canonical = LOSS_VARIANT_ALIASES.get(name, name)
    if canonical not in LOSS_VARIANTS:
        choices = sorted(LOSS_VARIANTS + tuple(LOSS_VARIANT_ALIASES))
        raise ConfigError(f"finetune_loss_variant must be one of {choices}, got {name!r}")
    return canonical


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters."""

    height: int = 32
    width: int = 128
    channels: int = 1
    patch_size: int = 4
    enc_dim: int = 128
    dec_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 12
    charset: str = "abcdefghijklmnopqrstuvwxyz0123456789"
    patch_mask_ratio: float = 0.75
    text_mask_ratio_explicit: float = 0.2
    text_mask_ratio_implicit: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.01
    epsilon: float = 0.01
    iterations: int = 3
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        """Validate configuration after initialization."""
        for name in ("height", "width", "channels", "patch_size", "enc_dim", "dec_dim",
                     "enc_heads", "dec_heads", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise ConfigError("model depths must be non-negative")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide image size {self.height}×{self.width}"
            )
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigError("embedding dims must be divisible by their head counts")
        if self.max_len < 2:
            raise ConfigError(f"model.max_len must be at least 2, got {self.max_len}")
        if not self.charset or len(set(self.charset)) != len(self.charset):
            raise ConfigError("model.charset must be non-empty with unique symbols")
        for name in ("patch_mask_ratio", "text_mask_ratio_explicit", "text_mask_ratio_implicit"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"model.{name} must lie in [0, 1]")
        if self.patch_mask_ratio >= 1.0:
            raise ConfigError("model.patch_mask_ratio must leave at least one visible patch")
        if self.iterations < 0:
            raise ConfigError(f"model.iterations must be non-negative, got {self.iterations}")
        if self.init_std <= 0:
            raise ConfigError("model.init_std must be positive")

    @property
    def grid(self) -> tuple:
        return (self.height // self.patch_size, self.width // self.patch_size)

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def canvas(self) -> tuple:
        return (self.height, self.width, self.channels)

    @property
    def num_classes(self) -> int:
        return len(self.charset) + 1

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _build(cls, data, "model")

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def micro_model_config(**overrides: Any) -> ModelConfig:
    """Smallest model that exercises every code path; used by the gradient check."""
    values: Dict[str, Any] = dict(
        height=8, width=16, channels=1, patch_size=4, enc_dim=16, dec_dim=8,
        enc_depth=1, enc_heads=2, dec_depth=1, dec_heads=2, max_len=4, charset="abcde",
    )
    values.update(overrides)
    return ModelConfig(**values)


def full_model_config() -> ModelConfig:
    return ModelConfig(
        height=112, width=448, channels=3, patch_size=14, enc_dim=768, dec_dim=512,
        enc_depth=12, enc_heads=12, dec_depth=4, dec_heads=8, max_len=27,
    )


MODEL_PRESETS = {
    "toy": ModelConfig,
    "micro": micro_model_config,
    "full": full_model_config,
}


@dataclass(frozen=True)
class LossToggles:
    use_lv1: bool = True
    use_lt1: bool = True
    use_lv2: bool = True
    use_lt2: bool = True
    use_iter: bool = True

    @property
    def any_text(self) -> bool:
        return self.use_lt1 or self.use_lt2


# Ablation rows: which of L_v1, L_t1, L_v2, L_t2 and iterative correction are on.
ABLATIONS: Dict[str, LossToggles] = {
    "full": LossToggles(True, True, True, True, True),
    "full_no_iter": LossToggles(True, True, True, True, False),
    "implicit": LossToggles(False, False, True, True, True),
    "implicit_no_iter": LossToggles(False, False, True, True, False),
    "explicit": LossToggles(True, True, False, False, True),
    "explicit_no_iter": LossToggles(True, True, False, False, False),
    "visual_only": LossToggles(True, False, False, False, False),
}


@dataclass
class TrainConfig:
    """One training stage."""

    stage: str = "pretrain"
    steps: int = 1000
    warmup_steps: int = 100
    batch_labeled: int = 16
    batch_unlabeled: int = 0
    base_lr: float = 1.5e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: Optional[float] = None
    layer_decay: Optional[float] = None
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 0
    augment: bool = True
    iterations: int = 3
    finetune_loss_variant: str = "halved"
    use_lv1: bool = True
    use_lt1: bool = True
    use_lv2: bool = True
    use_lt2: bool = True
    use_iter: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps <= 0:
            raise ConfigError(f"{self.stage}.steps must be positive, got {self.steps}")
        if self.batch_labeled < 0 or self.batch_unlabeled < 0:
            raise ConfigError("batch sizes must be non-negative")
        if self.batch_labeled + self.batch_unlabeled == 0:
            raise ConfigError("batch must contain at least one sample")
        if self.log_every <= 0 or self.ckpt_every < 0:
            raise ConfigError("log_every must be positive and ckpt_every non-negative")
        self.finetune_loss_variant = loss_variant(self.finetune_loss_variant)
        if self.iterations < 0:
            raise ConfigError(f"iterations must be non-negative, got {self.iterations}")
        if (self.stage == "finetune" and self.use_iter and self.iterations == 1
                and self.finetune_loss_variant == "halved"):
            raise ConfigError("the halved loss variant divides by 2(K-1); K=1 is undefined, use K=0, K>=2 or variant 'mean'")
        if self.stage == "finetune" and self.batch_labeled == 0:
            raise ConfigError("fine-tuning needs labeled samples")
        # LrSchedule validates the optimizer fields.
        self.schedule()

    @property
    def toggles(self) -> LossToggles:
        return LossToggles(self.use_lv1, self.use_lt1, self.use_lv2, self.use_lt2, self.use_iter)

    @property
    def effective_iterations(self) -> int:
        return self.iterations if self.use_iter else 0

    def schedule(self) -> LrSchedule:
        return LrSchedule(
            base_lr=self.base_lr,
            warmup_steps=self.warmup_steps,
            total_steps=self.steps,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            grad_clip=self.grad_clip,
            layer_decay=self.layer_decay,
        )

    def with_ablation(self, name: str) -> "TrainConfig":
        try:
            toggles = ABLATIONS[name]
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None
        return dataclasses.replace(self, **dataclasses.asdict(toggles))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], section: str = "train") -> "TrainConfig":
        return _build(cls, data, section)


def train_preset(stage: str, scale: str = "toy") -> TrainConfig:
    """Stage defaults at toy (minutes on a laptop) or full scale."""
    if stage == "pretrain":
        if scale == "full":
            return TrainConfig(stage="pretrain", steps=120000, warmup_steps=8000, batch_labeled=4096,
                               batch_unlabeled=2048, base_lr=1.5e-4, beta2=0.95)
        return TrainConfig(stage="pretrain")
    if stage == "finetune":
        if scale == "full":
            return TrainConfig(stage="finetune", steps=20000, warmup_steps=8000, batch_labeled=1024,
                               base_lr=1e-5, beta2=0.999, grad_clip=2.0, layer_decay=0.75,
                               augment=True, iterations=3)
        return TrainConfig(stage="finetune", steps=500, warmup_steps=100, batch_labeled=16,
                           base_lr=1e-4, beta2=0.999, grad_clip=2.0, layer_decay=0.75, iterations=3)
    raise ConfigError(f"stage must be one of {STAGES}, got {stage!r}")


@dataclass
class RunConfig:
    """Everything a run needs, serializable as versioned JSON."""

    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=lambda: train_preset("pretrain"))
    finetune: TrainConfig = field(default_factory=lambda: train_preset("finetune"))
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def preset(cls, scale: str = "toy", model_preset: Optional[str] = None) -> "RunConfig":
        if scale not in ("toy", "full"):
            raise ConfigError(f"scale must be 'toy' or 'full', got {scale!r}")
        name = model_preset or scale
        if name not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
        return cls(MODEL_PRESETS[name](), train_preset("pretrain", scale), train_preset("finetune", scale))

    def stage(self, name: str) -> TrainConfig:
        if name == "pretrain":
            return self.pretrain
        if name == "finetune":
            return self.finetune
        raise ConfigError(f"stage must be one of {STAGES}, got {name!r}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        """Overlay ``data`` on ``base`` (defaults when omitted); missing keys keep base values."""
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}; expected {SCHEMA_VERSION}")
        unknown = set(data) - {"schema_version", "seed", "model", "pretrain", "finetune"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = base or cls()
        merged = base.to_dict()
        for section in ("model", "pretrain", "finetune"):
            given = data.get(section, {})
            if not isinstance(given, dict):
                raise ConfigError(f"config section {section!r} must be a JSON object")
            merged[section].update(given)
            if section in STAGES:
                merged[section] = fit_warmup(merged[section], given)
        try:
            seed = int(data.get("seed", base.seed))
        except (TypeError, ValueError):
            raise ConfigError(f"seed must be an integer, got {data.get('seed')!r}") from None
        return cls(
            model=ModelConfig.from_dict(merged["model"]),
            pretrain=TrainConfig.from_dict(merged["pretrain"], "pretrain"),
            finetune=TrainConfig.from_dict(merged["finetune"], "finetune"),
            seed=seed,
        )

    @classmethod
    def load(cls, path: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except ValueError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(data, base)

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, falling back to text."""
        known = self.to_dict()
        data: Dict[str, Any] = {}
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            key = key.strip()
            value = _parse_value(raw)
            if key == "seed":
                data["seed"] = value
                continue
            section, _, name = key.partition(".")
            if section not in ("model", "pretrain", "finetune") or not name:
                raise ConfigError(f"override key {key!r} must be seed or model.*, pretrain.*, finetune.*")
            if name not in known[section]:
                raise ConfigError(f"unknown config field {key!r}")
            data.setdefault(section, {})[name] = value
        return RunConfig.from_dict(data, base=self)


def fit_warmup(values: Dict[str, Any], given: Dict[str, Any]) -> Dict[str, Any]:
    """
    Shorten warmup to a newly given step count.

    Applies only when ``given`` sets ``steps`` without ``warmup_steps``; an
    explicit warmup longer than the run is still rejected by TrainConfig.
    """
    steps = given.get("steps")
    if "warmup_steps" in given or not isinstance(steps, int) or isinstance(steps, bool):
        return values
    warmup = values.get("warmup_steps")
    if isinstance(warmup, int) and warmup > steps >= 0:
        return {**values, "warmup_steps": steps}
    return values


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def _build(cls: Any, data: Dict[str, Any], section: str) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {section} fields: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid {section} config: {e}") from e


class UsageArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with the usage exit code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class CliSettings:
    """Resolved command line: the command, its arguments and the run config."""

    command: str
    args: argparse.Namespace
    run: RunConfig
    log_level: str = "INFO"
    log_dir: str = "./logs"
    dump_config: bool = False


class ConfigManager:
    """Manages configuration from multiple sources."""

    def __init__(self):
        self.parser = self._create_parser()

    def _create_parser(self) -> argparse.ArgumentParser:
        """Create command-line argument parser."""
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--config", help="JSON run config (can also use MVLT_CONFIG env var)")
        common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                            help="Override one config field; repeatable")
        common.add_argument("--scale", choices=["toy", "full"], default="toy",
                            help="Preset scale for model and training defaults (default: toy)")
        common.add_argument("--model-preset", choices=sorted(MODEL_PRESETS),
                            help="Model preset, overriding the one implied by --scale")
        common.add_argument("--seed", type=int, help="Run seed (can also use MVLT_SEED env var)")
        common.add_argument("--dump-config", action="store_true",
                            help="Print the fully resolved run config as JSON and exit")
        common.add_argument("--log-level", choices=LOG_LEVELS,
                            help="Logging level (can also use MVLT_LOG_LEVEL env var, default: INFO)")
        common.add_argument("--log-dir", help="Directory for run log files (can also use MVLT_LOG_DIR env var)")

        parser = UsageArgumentParser(
            prog="mvlt-str",
            description="Masked vision-language transformer for scene-text recognition",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  mvlt-str gen-data --out data/train --n 256 --seed 1
  mvlt-str gen-data --out data/ur --n 128 --seed 2 --unlabeled --noise-level 0.08
  mvlt-str pretrain --data data/train --unlabeled-data data/ur --run-dir runs/pre
  mvlt-str finetune --data data/train --init runs/pre/pretrain_final.ckpt --run-dir runs/ft
  mvlt-str eval --checkpoint runs/ft/finetune_final.ckpt --data data/test --out reports/
  mvlt-str gradcheck --seed 0

Environment variables (.env file supported):
  MVLT_CONFIG     - JSON run config file
  MVLT_SEED       - Run seed
  MVLT_LOG_LEVEL  - Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
  MVLT_LOG_DIR    - Directory for run log files
            """
        )
        commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=UsageArgumentParser)
        commands.required = True

        gen = commands.add_parser("gen-data", parents=[common], help="Render a synthetic dataset")
        gen.add_argument("--out", required=True, help="Output dataset directory")
        gen.add_argument("--n", type=int, default=256, help="Number of samples (default: 256)")
        gen.add_argument("--start-index", type=int, default=0,
                         help="First sample index; disjoint ranges give disjoint splits")
        gen.add_argument("--unlabeled", action="store_true", help="Write no labels.tsv")
        gen.add_argument("--noise-level", type=float, default=0.05, help="Additive noise amplitude (max 0.1)")
        gen.add_argument("--word-list", help="File with one word per line instead of random words")
        gen.add_argument("--workers", type=int, default=1, help="Rendering threads (output is identical)")
        gen.add_argument("--strip-from", help="Copy an existing labeled dataset to --out without labels")

        for stage in STAGES:
            train = commands.add_parser(stage, parents=[common], help=f"Run the {stage} stage")
            train.add_argument("--data", required=True, help="Labeled dataset directory")
            train.add_argument("--run-dir", default=f"runs/{stage}", help="Checkpoints and loss logs go here")
            train.add_argument("--steps", type=int, help="Override the number of steps")
            train.add_argument("--ablation", choices=sorted(ABLATIONS), help="Loss toggle preset")
            train.add_argument("--resume", help="Continue from a checkpoint of this stage")
            if stage == "pretrain":
                train.add_argument("--unlabeled-data", help="Unlabeled dataset feeding the reconstruction-only loss")
                train.add_argument("--batch-unlabeled", type=int, help="Unlabeled samples per batch")
            else:
                train.add_argument("--init", help="Start from the weights of a pretraining checkpoint")
                train.add_argument("--iterations", type=int, help="Iterative correction count K")
                train.add_argument("--finetune-loss", dest="finetune_loss",
                                   choices=sorted(LOSS_VARIANTS + tuple(LOSS_VARIANT_ALIASES)),
                                   help="Iteration weighting: halved (as printed, alias paper) or mean")

        ev = commands.add_parser("eval", parents=[common], help="Word and character accuracy on a labeled set")
        ev.add_argument("--checkpoint", required=True)
        ev.add_argument("--data", required=True, help="Labeled dataset directory")
        ev.add_argument("--iterations", type=int, help=ITERATIONS_HELP)
        ev.add_argument("--out", help="Directory for eval_report.json, iteration_accuracy.csv and eval_report.xlsx")
        ev.add_argument("--batch-size", type=int, default=32)
        ev.add_argument("--limit", type=int, help="Evaluate only the first N samples")

        pred = commands.add_parser("predict", parents=[common], help="Read the word in one image")
        pred.add_argument("--checkpoint", required=True)
        pred.add_argument("--image", required=True)
        pred.add_argument("--iterations", type=int, help=ITERATIONS_HELP)

        rec = commands.add_parser("reconstruct", parents=[common], help="Dump masked input and both reconstructions")
        rec.add_argument("--checkpoint", required=True)
        rec.add_argument("--image", required=True)
        rec.add_argument("--out", required=True, help="Output directory")
        rec.add_argument("--label", help="Ground-truth word for the explicit-semantics decoder")

        grad = commands.add_parser("gradcheck", parents=[common], help="Compare analytic and finite-difference gradients")
        grad.add_argument("--tolerance", type=float, default=1e-4)
        grad.add_argument("--step-size", type=float, default=1e-5)

        return parser

    def load_config(self, argv: Optional[List[str]] = None) -> CliSettings:
        """Load configuration from command line, config file and environment variables."""
        load_dotenv()

        args = self.parser.parse_args(argv)

        run = RunConfig.preset(args.scale, args.model_preset)
        config_path = args.config or os.getenv("MVLT_CONFIG")
        if config_path:
            run = RunConfig.load(config_path, base=run)
        if args.overrides:
            run = run.with_overrides(args.overrides)

        seed = args.seed
        if seed is None and os.getenv("MVLT_SEED"):
            try:
                seed = int(os.environ["MVLT_SEED"])
            except ValueError:
                raise ConfigError(f"MVLT_SEED must be an integer, got {os.environ['MVLT_SEED']!r}") from None
        if seed is not None:
            run = dataclasses.replace(run, seed=seed)
        run = self._apply_stage_flags(run, args)

        log_level = args.log_level or os.getenv("MVLT_LOG_LEVEL", "INFO")
        log_dir = args.log_dir or os.getenv("MVLT_LOG_DIR", "./logs")

        return CliSettings(
            command=args.command,
            args=args,
            run=run,
            log_level=log_level,
            log_dir=log_dir,
            dump_config=args.dump_config,
        )

    def _apply_stage_flags(self, run: RunConfig, args: argparse.Namespace) -> RunConfig:
        if args.command not in STAGES:
            return run
        stage = run.stage(args.command)
        changes: Dict[str, Any] = {"seed": run.seed}
        if args.steps is not None:
            changes["steps"] = args.steps
        if getattr(args, "batch_unlabeled", None) is not None:
            changes["batch_unlabeled"] = args.batch_unlabeled
        if getattr(args, "iterations", None) is not None:
            changes["iterations"] = args.iterations
        if getattr(args, "finetune_loss", None) is not None:
            changes["finetune_loss_variant"] = args.finetune_loss
        stage = TrainConfig.from_dict(fit_warmup({**stage.to_dict(), **changes}, changes), args.command)
        if args.ablation:
            stage = stage.with_ablation(args.ablation)
        return dataclasses.replace(run, **{args.command: stage})
