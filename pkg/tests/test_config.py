import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoprompt.config import (
    SynthConfig,
    TrainConfig,
    build_configs,
    config_values,
    load_config,
    parse_config_text,
    serialize_config,
)
from protoprompt.errors import ConfigError


def test_defaults_round_trip():
    text = serialize_config(config_values(SynthConfig(), TrainConfig()))
    assert serialize_config(parse_config_text(text)) == text


def test_comments_and_blank_lines():
    values = parse_config_text("# header\n\nlr = 0.01\n  # indented comment\nseed=3\n")
    assert values == {"lr": 0.01, "seed": 3}


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="foo"):
        parse_config_text("foo=1\n")


@pytest.mark.parametrize("text", ["lr=abc\n", "seed=1.5\n", "pcl_enabled=maybe\n", "lr\n", "seed=1\nseed=2\n"])
def test_bad_values(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_shared_keys_feed_both_configs():
    synth, train = build_configs(parse_config_text("num_classes=5\nchannels=8\nseed=11\n"))
    assert (synth.num_classes, synth.channels, synth.seed) == (5, 8, 11)
    assert (train.num_classes, train.channels, train.seed) == (5, 8, 11)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")


@pytest.mark.parametrize("cfg", [TrainConfig(batch_size=0), TrainConfig(tau=0), TrainConfig(lr=-1),
                                 TrainConfig(channels=6, heads=4), SynthConfig(num_classes=1),
                                 SynthConfig(height=3), SynthConfig(snr=0)])
def test_validation(cfg):
    with pytest.raises(ConfigError):
        cfg.validate()


@settings(max_examples=50, deadline=None)
@given(
    lr=st.floats(1e-8, 10, allow_nan=False),
    tau=st.floats(1e-4, 10, allow_nan=False),
    steps=st.integers(0, 10_000),
    pcl=st.booleans(),
    path=st.text(alphabet="abcdefgh/._-", max_size=12),
)
def test_parse_serialize_idempotent(lr, tau, steps, pcl, path):
    text = serialize_config({"lr": lr, "tau": tau, "max_steps": steps, "pcl_enabled": pcl, "out_dir": path})
    once = parse_config_text(text)
    assert serialize_config(once) == text
    assert once["lr"] == lr and once["tau"] == tau
