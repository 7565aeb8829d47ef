import pytest

from depthprune.config import SCHEMA, ConfigError, parse_config


def test_seed_line():
    cfg = parse_config("seed = 80\n")
    assert cfg["seed"] == 80 and isinstance(cfg["seed"], int)


def test_empty_is_defaults():
    cfg = parse_config("")
    assert cfg.values == {k: v for k, (_, v) in SCHEMA.items()}
    assert cfg["seed"] == 80 and cfg["teacher_steps"] == 5000 and cfg["finetune_steps"] == 2000


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"line 1: unknown key 'sed'") as err:
        parse_config("sed = 80")
    assert err.value.line == 1


def test_comments_blanks_types():
    text = "# run\n\nlayers = 24   # deep\ntau = 0.5\nactivation = false\nstrategy = similarity\n"
    cfg = parse_config(text)
    assert (cfg["layers"], cfg["tau"], cfg["activation"], cfg["strategy"]) == (24, 0.5, False, "similarity")


def test_duplicate_last_wins(caplog):
    cfg = parse_config("k = 1\nk = 2\n")
    assert cfg["k"] == 2 and len(cfg.warnings) == 1
    assert "line 2" in caplog.text


@pytest.mark.parametrize("text,line", [("seed 80\n", 1), ("\n\nseed = \n", 3), ("d = 1.5\n", 1),
                                       ("activation = maybe\n", 1), ("= 4\n", 1)])
def test_malformed_lines(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line and f"line {line}" in str(err.value)


def test_resolved_round_trips():
    cfg = parse_config("tau = 0.3\nanneal = true\n")
    assert parse_config(cfg.resolved()).values == cfg.values
