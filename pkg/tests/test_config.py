import pytest
from hypothesis import given, settings, strategies as st

from smpjump.config import (KINDS, ConfigError, allowed_keys, build_config, defaults, load_config,
                            parse_config, serialize_config)


def test_minimal_config_fills_defaults():
    cfg = parse_config("kind = duality\nseed = 3\n")
    assert cfg.kind == "duality" and cfg.seed == 3
    assert cfg["paths"] == 100_000
    assert cfg["derivative.targets"] == ("H_T", "W_T", "constant")


def test_comments_lists_and_strings():
    cfg = parse_config('# comment\nkind = "validate-noise"\nseed = 1\nnoise.intensity = [2, 3]\n'
                       "noise.kind = cox\nnoise.marks = 2\n")
    assert cfg["noise.intensity"] == (2.0, 3.0)
    assert cfg["noise.kind"] == "cox"


@pytest.mark.parametrize("text, message", [
    ("seed = 1", "missing key 'kind'"),
    ("kind = duality", "seed"),
    ("kind = nope\nseed = 1", "unknown experiment kind"),
    ("kind = duality\nseed = 1\nfoo.bar = 2", "unknown key"),
    ("kind = validate-noise\nseed = 1\nmarket.rho = [0.1]", "not used"),
    ("kind = duality\nseed = 1\nseed = 2", "already set"),
    ("kind = duality\nseed = 1\njunk", "key = value"),
    ("kind = duality\nseed = 1\ngrid.steps = 10\ndissect.level = 4", "divisible"),
    ("kind = duality\nseed = 1\npaths = 0", "positive"),
    ("kind = duality\nseed = 1\nnoise.kind = levy", "noise.kind"),
    ("kind = duality\nseed = 1\npaths = many", "expected int"),
])
def test_rejections(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 2 ** 31), st.integers(1, 10 ** 6))
def test_serialize_round_trip(kind, seed, paths):
    cfg = build_config({"kind": kind, "seed": seed, "paths": paths})
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_overrides_and_echo():
    cfg = build_config({"kind": "optimize", "seed": 1})
    assert cfg["optimizer.refit_period"] == 1
    new = cfg.with_overrides({"paths": 10})
    assert new["paths"] == 10 and cfg["paths"] == 100_000
    assert set(cfg.echo()) == set(allowed_keys("optimize"))
    assert defaults("credit-benchmark")["grid.horizon"] == 5.0


def test_load_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("kind = dissect-check\nseed = 4\n")
    assert load_config(str(p)).seed == 4
    with pytest.raises(OSError):
        load_config(str(tmp_path / "missing.cfg"))
