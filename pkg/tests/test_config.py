"""
Unit tests for configuration management.
"""

import json
import os
import pytest
from unittest.mock import patch
import sys

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from mvlt_str.config import (
    ABLATIONS, ConfigManager, ModelConfig, RunConfig, TrainConfig, full_model_config,
    micro_model_config, train_preset,
)
from mvlt_str.errors import ConfigError


class TestModelConfig:
    """Test cases for ModelConfig dataclass."""

    def test_defaults(self):
        """Test the toy defaults."""
        config = ModelConfig()

        assert config.canvas == (32, 128, 1)
        assert config.grid == (8, 32)
        assert config.patch_dim == 16
        assert config.num_classes == 37
        assert (config.alpha, config.beta, config.gamma, config.epsilon) == (0.5, 0.5, 0.01, 0.01)

    def test_full_scale_keeps_the_patch_grid(self):
        """Test 112×448 images with 14×14 patches give the same 256 patches."""
        config = full_model_config()

        assert config.num_patches == 256
        assert config.patch_dim == 14 * 14 * 3
        assert config.max_len == 27

    def test_indivisible_patch_size(self):
        """Test a patch size that does not divide the image is rejected."""
        with pytest.raises(ConfigError, match="does not divide"):
            ModelConfig(patch_size=5)

    def test_patch_ratio_must_leave_a_patch(self):
        """Test masking every patch is rejected."""
        with pytest.raises(ConfigError):
            ModelConfig(patch_mask_ratio=1.0)

    def test_duplicate_charset(self):
        """Test a charset with repeated symbols is rejected."""
        with pytest.raises(ConfigError):
            ModelConfig(charset="abca")

    def test_config_hash_tracks_values(self):
        """Test equal configs hash alike and changed ones do not."""
        assert ModelConfig().config_hash() == ModelConfig().config_hash()
        assert ModelConfig().config_hash() != ModelConfig(gamma=0.02).config_hash()

    def test_micro_overrides(self):
        """Test the micro preset accepts overrides."""
        assert micro_model_config(init_std=0.2).init_std == 0.2


class TestTrainConfig:
    """Test cases for TrainConfig dataclass."""

    def test_halved_variant_rejects_one_iteration(self):
        """Test K=1 fine-tuning with the halved weighting is rejected."""
        with pytest.raises(ConfigError, match="K=1"):
            TrainConfig(stage="finetune", iterations=1)

    def test_mean_variant_accepts_one_iteration(self):
        """Test the mean weighting is defined for K=1."""
        config = TrainConfig(stage="finetune", iterations=1, finetune_loss_variant="mean")
        assert config.effective_iterations == 1

    def test_paper_alias_is_canonicalized(self):
        """Test the variant name 'paper' is accepted and stored as halved."""
        config = TrainConfig(stage="finetune", iterations=3, finetune_loss_variant="paper")
        assert config.finetune_loss_variant == "halved"
        with pytest.raises(ConfigError, match="K=1"):
            TrainConfig(stage="finetune", iterations=1, finetune_loss_variant="paper")

    def test_unknown_loss_variant(self):
        """Test an unknown variant name is rejected with the accepted names."""
        with pytest.raises(ConfigError, match="paper"):
            TrainConfig(finetune_loss_variant="median")

    def test_iteration_toggle_off(self):
        """Test use_iter=False means a single decode."""
        config = TrainConfig(stage="finetune", iterations=3, use_iter=False)
        assert config.effective_iterations == 0

    def test_finetune_needs_labeled_samples(self):
        """Test a fine-tuning batch without labeled rows is rejected."""
        with pytest.raises(ConfigError):
            TrainConfig(stage="finetune", batch_labeled=0, batch_unlabeled=4)

    def test_warmup_longer_than_run(self):
        """Test warmup beyond the total steps is rejected."""
        with pytest.raises(ConfigError, match="warmup_steps"):
            TrainConfig(steps=10, warmup_steps=20)

    def test_with_ablation(self):
        """Test an ablation sets the five toggles."""
        config = TrainConfig().with_ablation("implicit")

        assert config.toggles == ABLATIONS["implicit"]
        assert not config.use_lv1 and config.use_lv2

    def test_unknown_ablation(self):
        """Test an unknown ablation name is rejected."""
        with pytest.raises(ConfigError, match="unknown ablation"):
            TrainConfig().with_ablation("half")

    def test_presets(self):
        """Test the stage presets carry their optimizer settings."""
        pre = train_preset("pretrain")
        ft = train_preset("finetune")

        assert pre.grad_clip is None and pre.beta2 == 0.95
        assert ft.grad_clip == 2.0 and ft.layer_decay == 0.75 and ft.beta2 == 0.999
        assert train_preset("pretrain", "full").batch_unlabeled == 2048
        with pytest.raises(ConfigError):
            train_preset("distill")


class TestRunConfig:
    """Test cases for RunConfig serialization and overrides."""

    def test_dict_roundtrip(self):
        """Test to_dict/from_dict returns an equal config."""
        config = RunConfig.preset("toy", "micro")
        assert RunConfig.from_dict(config.to_dict()) == config

    def test_partial_dict_keeps_base(self):
        """Test missing keys keep the base values."""
        config = RunConfig.from_dict({"model": {"gamma": 0.02}})

        assert config.model.gamma == 0.02
        assert config.model.alpha == 0.5
        assert config.pretrain == train_preset("pretrain")

    def test_schema_version(self):
        """Test a newer schema version is rejected."""
        with pytest.raises(ConfigError, match="schema_version"):
            RunConfig.from_dict({"schema_version": 2})

    def test_unknown_section_and_field(self):
        """Test unknown sections and fields are rejected."""
        with pytest.raises(ConfigError, match="sections"):
            RunConfig.from_dict({"optimizer": {}})
        with pytest.raises(ConfigError, match="fields"):
            RunConfig.from_dict({"model": {"depth": 3}})

    def test_load_file(self, tmp_path):
        """Test loading a JSON file."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 4, "finetune": {"iterations": 2}}))
        config = RunConfig.load(str(path))

        assert config.seed == 4
        assert config.finetune.iterations == 2

    def test_load_invalid_json(self, tmp_path):
        """Test a malformed file is a config error."""
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            RunConfig.load(str(path))

    def test_overrides(self):
        """Test overrides parse JSON values with a string fallback."""
        config = RunConfig().with_overrides(["model.gamma=0.05", "pretrain.steps=7", "seed=3",
                                             "model.charset=abc"])

        assert config.model.gamma == 0.05
        assert config.pretrain.steps == 7
        assert config.seed == 3
        assert config.model.charset == "abc"

    def test_steps_override_shortens_warmup(self):
        """Test a step count below the warmup shortens the warmup to match."""
        config = RunConfig().with_overrides(["pretrain.steps=7"])

        assert config.pretrain.steps == 7
        assert config.pretrain.warmup_steps == 7
        assert config.finetune == RunConfig().finetune

    def test_explicit_warmup_beyond_steps(self):
        """Test an explicit warmup longer than the run is still rejected."""
        with pytest.raises(ConfigError, match="warmup_steps"):
            RunConfig().with_overrides(["finetune.steps=7", "finetune.warmup_steps=20"])

    def test_overrides_keep_earlier_sources(self):
        """Test overrides apply on top of the current config, not on defaults."""
        base = RunConfig.from_dict({"pretrain": {"steps": 50, "warmup_steps": 5, "base_lr": 0.01}})
        config = base.with_overrides(["pretrain.steps=20"])

        assert config.pretrain.base_lr == 0.01
        assert config.pretrain.warmup_steps == 5

    def test_file_steps_shorten_warmup(self, tmp_path):
        """Test a config file giving only steps gets the same warmup as --set."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"finetune": {"steps": 40}}))

        assert RunConfig.load(str(path)).finetune == RunConfig().with_overrides(["finetune.steps=40"]).finetune
        assert RunConfig.load(str(path)).finetune.warmup_steps == 40

    def test_bad_seed_value(self):
        """Test a non-integer seed is a config error."""
        with pytest.raises(ConfigError, match="seed"):
            RunConfig().with_overrides(["seed=abc"])

    def test_bad_overrides(self):
        """Test malformed overrides are rejected."""
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(["model.gamma"])
        with pytest.raises(ConfigError, match="unknown config field"):
            RunConfig().with_overrides(["model.width_mult=2"])
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(["optim.lr=1"])


@patch('mvlt_str.config.load_dotenv')
class TestConfigManager:
    """Test cases for ConfigManager."""

    def test_create_parser(self, mock_load_dotenv):
        """Test every subcommand parses."""
        manager = ConfigManager()
        for argv in (["gen-data", "--out", "d"], ["pretrain", "--data", "d"], ["finetune", "--data", "d"],
                     ["eval", "--checkpoint", "c", "--data", "d"], ["predict", "--checkpoint", "c", "--image", "i"],
                     ["reconstruct", "--checkpoint", "c", "--image", "i", "--out", "o"], ["gradcheck"]):
            assert manager.parser.parse_args(argv).command == argv[0]

    @patch.dict(os.environ, {'MVLT_SEED': '11', 'MVLT_LOG_LEVEL': 'DEBUG'}, clear=True)
    def test_load_config_from_env(self, mock_load_dotenv):
        """Test loading seed and log level from environment variables."""
        settings = ConfigManager().load_config(["gradcheck"])

        assert settings.run.seed == 11
        assert settings.log_level == "DEBUG"
        assert settings.log_dir == "./logs"

    @patch.dict(os.environ, {'MVLT_SEED': '11'}, clear=True)
    def test_cli_overrides_env(self, mock_load_dotenv):
        """Test that CLI arguments override environment variables."""
        settings = ConfigManager().load_config(["gradcheck", "--seed", "5", "--log-level", "WARNING"])

        assert settings.run.seed == 5
        assert settings.log_level == "WARNING"

    @patch.dict(os.environ, {'MVLT_SEED': 'eleven'}, clear=True)
    def test_bad_env_seed(self, mock_load_dotenv):
        """Test a non-integer MVLT_SEED is a config error."""
        with pytest.raises(ConfigError, match="MVLT_SEED"):
            ConfigManager().load_config(["gradcheck"])

    @patch.dict(os.environ, {}, clear=True)
    def test_config_file_then_set_then_flags(self, mock_load_dotenv, tmp_path):
        """Test precedence: file, then --set, then explicit flags."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"pretrain": {"steps": 50, "warmup_steps": 5, "base_lr": 0.01}}))
        settings = ConfigManager().load_config([
            "pretrain", "--data", "d", "--config", str(path),
            "--set", "pretrain.base_lr=0.02", "--steps", "3", "--ablation", "explicit",
        ])
        stage = settings.run.pretrain

        assert stage.base_lr == 0.02
        assert stage.steps == 3
        assert stage.warmup_steps == 3
        assert stage.toggles == ABLATIONS["explicit"]

    @patch.dict(os.environ, {}, clear=True)
    def test_set_and_flag_agree_on_steps(self, mock_load_dotenv):
        """Test --set pretrain.steps and --steps give the same stage config."""
        manager = ConfigManager()
        via_set = manager.load_config(["pretrain", "--data", "d", "--set", "pretrain.steps=7"]).run.pretrain
        via_flag = manager.load_config(["pretrain", "--data", "d", "--steps", "7"]).run.pretrain

        assert via_set == via_flag
        assert via_flag.warmup_steps == 7

    @patch.dict(os.environ, {}, clear=True)
    def test_finetune_loss_flag(self, mock_load_dotenv):
        """Test --finetune-loss accepts 'paper' and the mean variant."""
        manager = ConfigManager()
        paper = manager.load_config(["finetune", "--data", "d", "--finetune-loss", "paper"]).run.finetune
        mean = manager.load_config(["finetune", "--data", "d", "--iterations", "1",
                                    "--finetune-loss", "mean"]).run.finetune
        via_set = manager.load_config(["finetune", "--data", "d",
                                       "--set", "finetune.finetune_loss_variant=paper"]).run.finetune

        assert paper.finetune_loss_variant == "halved"
        assert via_set == paper
        assert mean.finetune_loss_variant == "mean" and mean.iterations == 1

    @patch.dict(os.environ, {}, clear=True)
    def test_config_file_from_env(self, mock_load_dotenv, tmp_path):
        """Test MVLT_CONFIG names the config file."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"model": {"iterations": 2}}))
        with patch.dict(os.environ, {'MVLT_CONFIG': str(path)}):
            settings = ConfigManager().load_config(["gradcheck"])
        assert settings.run.model.iterations == 2

    @patch.dict(os.environ, {}, clear=True)
    def test_stage_seed_follows_run_seed(self, mock_load_dotenv):
        """Test the training stage uses the run seed."""
        settings = ConfigManager().load_config(["finetune", "--data", "d", "--seed", "9", "--iterations", "2"])

        assert settings.run.finetune.seed == 9
        assert settings.run.finetune.iterations == 2

    @patch.dict(os.environ, {}, clear=True)
    def test_missing_command_exits_with_usage_code(self, mock_load_dotenv):
        """Test a usage error exits with code 1."""
        with pytest.raises(SystemExit) as excinfo:
            ConfigManager().load_config([])
        assert excinfo.value.code == 1

    @patch.dict(os.environ, {}, clear=True)
    def test_missing_required_flag(self, mock_load_dotenv):
        """Test a missing required flag exits with code 1."""
        with pytest.raises(SystemExit) as excinfo:
            ConfigManager().load_config(["eval", "--data", "d"])
        assert excinfo.value.code == 1
