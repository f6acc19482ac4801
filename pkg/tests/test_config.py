import json
from dataclasses import dataclass, field

import pytest

from distillkit.config import apply_override, config_hash, diff, flatten, from_dict, load_json_tree, located, to_dict
from distillkit.engine import DistillConfig
from distillkit.errors import ConfigError
from distillkit.models import EncoderConfig


@dataclass(frozen=True)
class Inner:
    rate: float = 0.5
    sizes: tuple[int, ...] = (1, 2)


@dataclass(frozen=True)
class Outer:
    name: str = "x"
    flag: bool = False
    inner: Inner = field(default_factory=Inner)
    extra: int | None = None


def test_round_trip():
    o = Outer("y", True, Inner(0.25, (3,)), 4)
    assert from_dict(Outer, to_dict(o)) == o
    assert from_dict(DistillConfig, to_dict(DistillConfig())) == DistillConfig()
    assert from_dict(EncoderConfig, to_dict(EncoderConfig())) == EncoderConfig()


def test_hash_tracks_content():
    assert config_hash(Outer()) == config_hash(Outer())
    assert config_hash(Outer()) != config_hash(Outer(flag=True))
    assert len(config_hash(Outer())) == 16


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError, match=r"unknown config key\(s\): inner.speed"):
        from_dict(Outer, {"inner": {"speed": 1}})


@pytest.mark.parametrize("data, needle", [
    ({"flag": 1}, "flag: expected true/false"),
    ({"inner": {"rate": "fast"}}, "inner.rate: expected a number"),
    ({"inner": {"sizes": [1, "a"]}}, r"inner.sizes\[1\]: expected an integer"),
    ({"inner": 3}, "inner: expected an object"),
])
def test_type_errors_name_the_key(data, needle):
    with pytest.raises(ConfigError, match=needle):
        from_dict(Outer, data)


def test_int_accepted_for_float_and_none_for_optional():
    o = from_dict(Outer, {"inner": {"rate": 1}, "extra": None})
    assert o.inner.rate == 1.0 and isinstance(o.inner.rate, float) and o.extra is None


def test_overrides():
    tree = to_dict(Outer())
    apply_override(tree, "inner.rate=0.1")
    apply_override(tree, "name=plain text")
    apply_override(tree, "inner.sizes=[4,5]")
    assert from_dict(Outer, tree) == Outer("plain text", False, Inner(0.1, (4, 5)))
    with pytest.raises(ConfigError, match="unknown config key: inner.nope"):
        apply_override(tree, "inner.nope=1")
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        apply_override(tree, "inner.rate")


def test_flatten_and_diff():
    a, b = to_dict(Outer()), to_dict(Outer(inner=Inner(rate=0.7)))
    assert flatten(a)["inner.rate"] == 0.5
    assert diff(a, b) == ["inner.rate: 0.5 -> 0.7"]


def test_json_errors_are_line_numbered(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "name": "a",\n  "flag": tru\n}\n')
    with pytest.raises(ConfigError, match=r"c\.json:3: invalid JSON"):
        load_json_tree(p)


def test_schema_errors_are_located(tmp_path):
    p = tmp_path / "c.json"
    text = json.dumps({"name": "a", "inner": {"rate": 1, "speed": 2}}, indent=2)
    p.write_text(text)
    tree, text = load_json_tree(p)
    with pytest.raises(ConfigError) as e:
        from_dict(Outer, tree)
    err = located(e.value, p, text)
    line = next(i for i, l in enumerate(text.splitlines(), 1) if '"speed"' in l)
    assert str(err).startswith(f"{p}:{line}: unknown config key(s): inner.speed")
