# test_settings_manager.py

import re
from pathlib import Path

import pytest

from src.errors import ConfigError
from src.models import (
    ExperimentConfig,
    GeneratorKind,
    MissingCase,
    PromptConfig,
    Variant,
    check_variant,
    prompts_for_variant,
)
from src.settings_manager import (
    SettingsManager,
    config_hash,
    config_to_text,
    load_config,
    parse_config_text,
    validate_config,
)


def write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_micro_config(micro_config_file):
    config = load_config(micro_config_file)
    assert config.model.d_model == 8
    assert config.experiment.variants == [Variant.BASELINE, Variant.DCP]
    assert config.missing.etas == [0.5]
    assert config.missing.case is MissingCase.BOTH
    assert config.model.weights is None


def test_empty_file_gives_defaults(tmp_path):
    assert load_config(write(tmp_path, "# nothing here\n")) == ExperimentConfig()


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("[model]\nd_model = 8\nbogus = 1\n", 3, "bogus"),
        ("[model]\n\n[nonsense]\n", 3, "unknown section"),
        ("[model]\nd_model = 8\nd_model = 16\n", 3, "repeated"),
        ("d_model = 8\n", 1, "outside"),
        ("[model]\nd_model\n", 2, "key = value"),
        ("[model]\n[model]\n", 2, "appears twice"),
        ("[training]\nepochs = 3\nlr_max = fast\n", 3, "lr_max"),
        ("[experiment]\nvariants = dcp, nonsense\n", 2, "variants"),
        ("[missing]\netas = 0.5, 1.5\n", 2, "etas"),
        ("[data]\nvocab_size = 32\nn_classes = 4\ntext_synonyms = 9\n", 1, "tokens per position"),
    ],
)
def test_errors_carry_line_numbers(tmp_path, text, line, fragment):
    path = write(tmp_path, text)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    message = str(info.value)
    assert message.startswith(f"{path}:{line}:")
    assert fragment in message


def test_section_level_error_points_at_header(tmp_path):
    path = write(tmp_path, "# shapes\n[model]\nn_layers = 2\nprompt_depth = 3\n")
    with pytest.raises(ConfigError, match=re.escape(f"{path}:2:")):
        load_config(path)


def test_desk_config_uses_the_hard_codebook():
    config = load_config(Path(__file__).parent / "configs" / "default.cfg")
    assert (config.data.text_synonyms, config.data.image_modes) == (16, 4)
    assert not config.training.eval_train_each_epoch
    assert config.experiment.variants == [Variant.BASELINE, Variant.MMP_INDEPENDENT, Variant.DCP]


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_lists_and_optionals():
    data, lines = parse_config_text("[model]\nff_hidden = none\n[missing]\neval_cases = both, text_missing\n")
    assert data["model"]["ff_hidden"] is None
    assert data["missing"]["eval_cases"] == ["both", "text_missing"]
    assert lines[("missing", "eval_cases")] == 4
    config = validate_config(data, lines, "<test>")
    assert config.missing.eval_cases == [MissingCase.BOTH, MissingCase.TEXT_MISSING]


def test_written_config_reads_back(tmp_path, micro_config):
    path = write(tmp_path, config_to_text(micro_config))
    assert load_config(path) == micro_config


def test_hash_is_stable_and_sensitive(micro_config):
    digest = config_hash(micro_config)
    assert re.fullmatch(r"[0-9a-f]{16}", digest)
    assert config_hash(micro_config.model_copy()) == digest

    changed = micro_config.model_copy(update={"data": micro_config.data.model_copy(update={"noise": 0.3})})
    assert config_hash(changed) != digest

    moved = micro_config.model_copy(update={"output": micro_config.output.model_copy(update={"directory": "elsewhere"})})
    assert config_hash(moved) == digest


def test_settings_manager_overrides(micro_config_file, tmp_path):
    manager = SettingsManager(micro_config_file)
    before = manager.config_hash
    manager.apply_overrides(seed=7, out=str(tmp_path / "out"))
    assert manager.settings.experiment.seeds == [7]
    assert manager.settings.output.directory == str(tmp_path / "out")
    assert manager.config_hash != before

    manager.save_settings(tmp_path / "saved.cfg")
    assert load_config(tmp_path / "saved.cfg") == manager.settings


def test_micro_text_matches_fixture(micro_config_file, micro_config):
    loaded = load_config(micro_config_file)
    assert loaded.model == micro_config.model
    assert loaded.data == micro_config.data
    assert loaded.prompts == micro_config.prompts


# --- Variant rules ---

def test_variants_keep_total_length():
    prompts = PromptConfig()
    for variant in (Variant.MMP_INDEPENDENT, Variant.DCP, Variant.DCP_A, Variant.DCP_B):
        assert prompts_for_variant(variant, prompts).total_length == prompts.total_length
    assert prompts_for_variant(Variant.BASELINE, prompts).total_length == 0
    assert prompts_for_variant(Variant.MMP_INDEPENDENT, prompts).generator is GeneratorKind.NONE
    assert prompts_for_variant(Variant.DCP_B, prompts).common_length == 0


def test_check_variant_rules():
    with pytest.raises(ConfigError):
        check_variant(Variant.BASELINE, PromptConfig())
    with pytest.raises(ConfigError):
        check_variant(Variant.MMP_INDEPENDENT, PromptConfig(generator=GeneratorKind.MLP))
    check_variant(Variant.MMP_INDEPENDENT, PromptConfig(generator=GeneratorKind.NONE))
