import pytest

from blockloc.config import DEFAULTS, Config, describe
from blockloc.errors import ConfigError


def test_defaults():
    cfg = Config.load()
    assert cfg == DEFAULTS
    tc = cfg.tracker_config()
    assert tc.max_window == 20 and tc.reserve_on_switch == 5 and tc.hysteresis == 3
    assert tc.information_scale == pytest.approx(100.0)


def test_file_and_overrides(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("# comment\nndt.voxel_size = 2.0\n\ntracker.max_window = 12  # trailing\nmap.strict = yes\n")
    cfg = Config.load(path, ["tracker.max_window=8"])
    assert cfg["ndt.voxel_size"] == 2.0 and cfg["map.strict"] is True
    assert cfg["tracker.max_window"] == 8
    assert cfg.tracker_config().ndt_voxel == 2.0


@pytest.mark.parametrize("text", ["nope.key = 1", "ndt.sigma = abc", "ndt.sigma = nan", "just words", "map.strict = maybe"])
def test_bad_files(tmp_path, text):
    path = tmp_path / "c.conf"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        Config.load(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "absent.conf")


def test_bad_override():
    with pytest.raises(ConfigError):
        Config.load(None, ["tracker.max_window"])


def test_describe_lists_every_key():
    text = describe(Config.load())
    assert len(text.splitlines()) == len(DEFAULTS)
    assert "ndt.voxel_size = 1.0" in text
