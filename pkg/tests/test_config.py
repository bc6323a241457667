"""Run-config schema tests."""

import pytest

from reldet.config import ConfigError, NOISE_PRESETS, RunConfig, load_run_config
from reldet.scenes import default_vocab


class TestDefaults:
    def test_no_file_gives_defaults(self):
        cfg = load_run_config(None)
        assert cfg == RunConfig()
        assert cfg.train_scenes == 2000
        assert cfg.test_scenes == 500
        assert cfg.training.epochs == 30
        assert cfg.training.batch_size == 32

    def test_model_config_uses_vocab_sizes(self):
        model = RunConfig().model_config(default_vocab())
        assert model.num_predicates == 6
        assert model.num_categories == 8
        assert model.vin_channels == (16, 32, 64)


class TestLoading:
    def test_overrides_apply(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("""
[generator]
train_scenes = 12
test_scenes = 3

[training]
epochs = 2
learning_rate = 0.01

[evaluation]
ks = 10,20
""")
        cfg = load_run_config(path)
        assert cfg.train_scenes == 12 and cfg.test_scenes == 3
        assert cfg.training.epochs == 2
        assert cfg.training.learning_rate == 0.01
        assert cfg.eval_ks == (10, 20)
        assert cfg.input_resolution == 64  # untouched default

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[training]\nepoch = 3\n")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[training]\nepochs = many\n")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_invalid_domain_value_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[model]\ndropout_rate = 1.5\n")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.ini")


class TestResolvedText:
    def test_resolved_text_parses_back_to_same_config(self, tmp_path):
        cfg = load_run_config(None)
        path = tmp_path / "resolved.ini"
        path.write_text(cfg.resolved_text())
        assert load_run_config(path) == cfg

    def test_resolved_text_lists_every_schema_key(self):
        from reldet.config import _SCHEMA
        text = RunConfig().resolved_text()
        for section, keys in _SCHEMA.items():
            assert f"[{section}]" in text
            for key in keys:
                assert f"{key} = " in text


class TestNoisePresets:
    def test_zero_preset_is_noiseless(self):
        zero = NOISE_PRESETS["zero"]
        assert zero.jitter_sigma == 0.0 and zero.drop_prob == 0.0
        assert zero.flip_prob == 0.0 and zero.false_positive_rate == 0.0

    def test_presets_are_valid_configs(self):
        for preset in NOISE_PRESETS.values():
            assert 0.0 <= preset.flip_prob <= 1.0
