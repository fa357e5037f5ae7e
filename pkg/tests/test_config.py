import pytest

from loraprune_lab import config
from loraprune_lab.errors import ConfigError

EXAMPLE = """
[lab]
seed = 3

[data]
kind = blobs
n = 500
classes = 5

[downstream]
shift = 0.5
seed = 1

[model]
hidden = 8, 4

[prune]
lambda = 0.8
track_oracle = yes

[compare]
criteria = lora-grad, random
sparsities = 0.3, 0.5
seeds = 0, 1
"""


def test_parse_and_inherit():
    cfg = config.parse(EXAMPLE)
    assert cfg.seed == 3 and cfg.model.seed == 3
    assert cfg.downstream.n == 500 and cfg.downstream.shift == 0.5 and cfg.downstream.seed == 1
    assert cfg.data.shift == 0.0
    assert cfg.model.hidden == (8, 4) and cfg.model.classes == 5
    assert cfg.prune.lam == 0.8 and cfg.prune.track_oracle is True
    assert cfg.compare.sparsities == [0.3, 0.5] and cfg.compare.seeds == [0, 1]


def test_hash_is_stable_and_sensitive():
    a, b = config.parse(EXAMPLE), config.parse(EXAMPLE)
    assert a.hash() == b.hash() and len(a.hash()) == 12
    assert a.with_seed(4).hash() != a.hash()


@pytest.mark.parametrize("text,where", [
    ("[data]\nn = many\n", ":2 [data] n"),
    ("[prune]\nbogus = 1\n", ":2 [prune] bogus"),
    ("[nonsense]\nx = 1\n", "nonsense"),
    ("[prune]\ntrack_oracle = maybe\n", "track_oracle"),
    ("no section here\n", "<string>"),
])
def test_errors_name_location(text, where):
    with pytest.raises(ConfigError, match=where.replace("[", r"\[").replace("]", r"\]")):
        config.parse(text)


def test_downstream_must_match_shape():
    with pytest.raises(ConfigError):
        config.parse("[downstream]\nclasses = 3\n")


def test_bad_model_value():
    with pytest.raises(ConfigError):
        config.parse("[model]\narch = rnn\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "absent.ini")


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.ini")):
        assert config.load(path).source == str(path)
