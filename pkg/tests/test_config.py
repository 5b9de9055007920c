from pathlib import Path

import pydantic
import pytest

from motionbias.config import Config, get_config, load_config, set_config

EXAMPLE = Path(__file__).resolve().parent.parent / "config.example.yml"


def test_example_config_documents_the_defaults():
    assert load_config(str(EXAMPLE)) == Config()


def test_partial_yaml_keeps_defaults(tmp_path):
    path = tmp_path / "config.yml"
    path.write_text("motion:\n  events: 3\ntrain:\n  augment:\n    enabled: false\n")
    config = load_config(str(path))
    assert config.motion.events == 3
    assert not config.train.augment.enabled
    assert config.phantom == Config().phantom


def test_json_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"runtime": {"threads": 4}, "preprocess": {"pad_target": 72}}')
    config = load_config(str(path))
    assert config.runtime.threads == 4
    assert config.preprocess.pad_target == 72


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.yml"
    path.write_text("")
    assert load_config(str(path)) == Config()


@pytest.mark.parametrize("text", [
    "phantom:\n  sizee: 64\n",
    "train:\n  batch_size: 32\n",
    "motion:\n  event_window: [0.8, 0.2]\n",
    "split:\n  counts:\n    minimal: {train: 1, val: 1, test: 1}\n",
])
def test_invalid_config(tmp_path, text):
    path = tmp_path / "config.yml"
    path.write_text(text)
    with pytest.raises(pydantic.ValidationError):
        load_config(str(path))


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="config.example.yml"):
        load_config(str(tmp_path / "config.yml"))


def test_global_config():
    set_config(None)
    assert get_config() == Config()
    custom = Config(runtime={"threads": 2})
    set_config(custom)
    assert get_config() is custom
