"""Config schema, parsing strictness, and round-trip determinism."""

import dataclasses

import pytest
from hypothesis import given, strategies as st

from parl.config import (
    ExperimentConfig,
    OUTPUT_ROOT_ENV,
    parse_config,
    read_config,
    render_config,
    write_config,
)
from parl.errors import ConfigurationError

config_strategy = st.builds(
    ExperimentConfig,
    robots=st.integers(min_value=1, max_value=8),
    samples_per_task=st.integers(min_value=1, max_value=64),
    fan_out=st.integers(min_value=1, max_value=6),
    tau=st.floats(min_value=0.0, max_value=1.0),
    beta=st.floats(min_value=0.0, max_value=1.0),
    ridge_lambda=st.floats(min_value=0.0, max_value=10.0),
    fail_threshold=st.floats(min_value=1e-6, max_value=1.0),
    holdout_fraction=st.floats(min_value=0.01, max_value=0.99),
    world_seed=st.integers(min_value=0, max_value=2**31),
    augment_seed=st.integers(min_value=0, max_value=2**31),
    protocol_seed=st.integers(min_value=0, max_value=2**31),
    run_color_jitter=st.booleans(),
    run_random_crop=st.booleans(),
    include_self_labels=st.booleans(),
    per_robot_shared=st.booleans(),
    output_dir=st.text(
        alphabet=st.characters(whitelist_categories=("Ll", "Nd"), whitelist_characters="-_."),
        min_size=1,
        max_size=24,
    ),
)


@given(config=config_strategy)
def test_render_parse_round_trip(config):
    assert parse_config(render_config(config)) == config


@given(config=config_strategy)
def test_render_is_stable(config):
    text = render_config(config)
    assert render_config(parse_config(text)) == text


def test_defaults_are_valid_and_documented():
    config = ExperimentConfig()
    text = render_config(config)
    for f in dataclasses.fields(ExperimentConfig):
        assert f"{f.name} = " in text
    assert OUTPUT_ROOT_ENV == "PARL_OUTPUT_ROOT"


def test_file_round_trip(tmp_path):
    path = tmp_path / "config.txt"
    config = ExperimentConfig(robots=2, tau=0.25, output_dir="alt")
    write_config(path, config)
    assert read_config(path) == config


def test_comments_and_blank_lines_are_ignored():
    text = "# header\n\nrobots = 2  # trailing comment\n\n  \ntau = 0.75\n"
    config = parse_config(text)
    assert config.robots == 2
    assert config.tau == 0.75


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError, match="unknown key"):
        parse_config("robot_count = 3\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigurationError, match="duplicate"):
        parse_config("robots = 2\nrobots = 3\n")


def test_missing_equals_rejected():
    with pytest.raises(ConfigurationError, match="key = value"):
        parse_config("robots 3\n")


def test_bad_int_rejected():
    with pytest.raises(ConfigurationError, match="bad value for robots"):
        parse_config("robots = three\n")


def test_bad_float_rejected():
    with pytest.raises(ConfigurationError, match="bad value for tau"):
        parse_config("tau = half\n")


@pytest.mark.parametrize("text", ["True", "1", "yes", "FALSE"])
def test_bool_parsing_is_strict(text):
    with pytest.raises(ConfigurationError):
        parse_config(f"run_color_jitter = {text}\n")


@pytest.mark.parametrize(
    "field,value",
    [
        ("robots", 0),
        ("samples_per_task", 0),
        ("fan_out", 0),
        ("tau", 1.5),
        ("beta", -0.1),
        ("ridge_lambda", -1e-9),
        ("fail_threshold", 0.0),
        ("holdout_fraction", 0.0),
        ("holdout_fraction", 1.0),
        ("world_seed", -1),
        ("output_dir", ""),
    ],
)
def test_field_validation(field, value):
    with pytest.raises(ConfigurationError):
        ExperimentConfig(**{field: value})


def test_parse_applies_same_validation():
    with pytest.raises(ConfigurationError):
        parse_config("holdout_fraction = 1.0\n")
