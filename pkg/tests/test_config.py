import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseplane.config import RunConfig, load_config, stream
from phaseplane.errors import ConfigInvalid


def test_defaults_valid():
    cfg = load_config({})
    assert cfg.exponents == (3.0, 3.0, 3.0)
    assert cfg.k_values == (3, 11, 19)
    assert 2 < cfg.alpha_value < 8


def test_holder_triple_passes():
    load_config({"exponents": [3, 3, 3]})
    load_config({"exponents": [3, 4, 2.4]})


@pytest.mark.parametrize(
    "data, needle",
    [
        ({"exponents": [3, 3, 4]}, "sum of 1/p_n = 1"),
        ({"exponents": [2, 4, 4]}, "2 < p_n < inf"),
        ({"exponents": [float("inf"), 2, 2]}, "2 < p_n < inf"),
        ({"alpha": 2.0}, "2d < alpha < 8d"),
        ({"alpha": 8.0}, "2d < alpha < 8d"),
        ({"block_map": {"d": 2, "L": [[[1, 0], [0, 1]]] * 2 + [[[-2, 0], [0, -2]]]}, "alpha": 3.5},
         "2d < alpha < 8d"),
        ({"dilation": {"k0": 3, "k1": 3}}, "k2 > k1 > k0 >= 3"),
        ({"dilation": {"k0": 5, "k1": 7, "k2": 6}}, "k2 > k1 > k0 >= 3"),
        ({"dilation": {"k0": 2}, "whitney": {"k0": 2}}, "k2 > k1 > k0 >= 3"),
        ({"dilation": {"k0": 3, "k1": 10, "k2": 20}, "strict_paper_gaps": True}, "k_i - k_j > 100d"),
        ({"whitney": {"k0": 4}}, "differs"),
        ({"whitney": {"j_range": [5, 3]}}, "empty scale range"),
        ({"seed": -1}, "seed"),
        ({"grid": {"R": 1, "unknown": 2}}, "unknown"),
    ],
)
def test_violations_named(data, needle):
    with pytest.raises(ConfigInvalid) as e:
        load_config(data)
    assert needle in str(e.value)


def test_strict_gaps_default():
    cfg = load_config({}, strict_paper_gaps=True)
    k0, k1, k2 = cfg.k_values
    assert k1 - k0 > 100 and k2 - k1 > 100


def test_seed_override_and_hash():
    a = load_config({"seed": 5})
    b = load_config({}, seed=5)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != load_config({"seed": 6}).config_hash()


def test_hash_ignores_key_order(tmp_path):
    data = {"grid": {"m": 9, "R": 64.0}, "seed": 3, "exponents": [3, 3, 3]}
    rev = json.loads(json.dumps(dict(reversed(list(data.items())))))
    assert load_config(data).config_hash() == load_config(rev).config_hash()
    p = tmp_path / "c.json"
    p.write_text(json.dumps(data))
    assert load_config(p).canonical_json() == load_config(data).canonical_json()


def test_streams_independent_and_reproducible():
    a = stream(7, "fields/0").random(4)
    assert np.array_equal(a, stream(7, "fields/0").random(4))
    assert not np.array_equal(a, stream(7, "fields/1").random(4))
    assert not np.array_equal(a, stream(8, "fields/0").random(4))


@settings(max_examples=60, deadline=None)
@given(st.floats(2.05, 20.0), st.floats(2.05, 20.0))
def test_exponent_rule(p1, p2):
    rest = 1.0 - 1.0 / p1 - 1.0 / p2
    if rest <= 0 or 1.0 / rest <= 2.0:
        with pytest.raises(ConfigInvalid):
            load_config({"exponents": [p1, p2, 3.0]}) if rest <= 0 else load_config(
                {"exponents": [p1, p2, 1.0 / rest]}
            )
        return
    cfg = load_config({"exponents": [p1, p2, 1.0 / rest]})
    assert abs(sum(1.0 / x for x in cfg.exponents) - 1.0) < 1e-12


def test_model_roundtrip():
    cfg = load_config({"seed": 11, "stages": ["whitney", "tiles"]})
    again = RunConfig.model_validate_json(cfg.canonical_json())
    assert again.config_hash() == cfg.config_hash()
