"""Run-config parsing and precedence."""

import pytest

from toothfill import config as cfgmod
from toothfill.errors import ConfigError


def write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


class TestLoadConfig:
    def test_defaults(self):
        cfg = cfgmod.load_config()
        assert cfg["train"]["lr"] == 1e-4
        assert cfg["unet"]["channel_mult"] == (1, 2, 4)
        assert cfg["train"]["dropout_p"] == 0.10

    def test_file_values_are_typed(self, tmp_path):
        p = write(tmp_path, "[unet]\nbase_channels = 8\nchannel_mult = 1, 2\nantagonist_enabled = no  # off\n"
                            "[data]\nphantom_seeds = 0 3\n")
        cfg = cfgmod.load_config(p)
        assert cfg["unet"]["base_channels"] == 8
        assert cfg["unet"]["channel_mult"] == (1, 2)
        assert cfg["unet"]["antagonist_enabled"] is False
        assert cfg["data"]["phantom_seeds"] == (0, 3)

    def test_override_beats_file(self, tmp_path):
        p = write(tmp_path, "[train]\nsteps = 10\n")
        cfg = cfgmod.load_config(p, ["train.steps=20"])
        assert cfg["train"]["steps"] == 20

    def test_relative_paths_follow_file(self, tmp_path):
        p = write(tmp_path, "[train]\nmanifest = ds/manifest.json\n")
        cfg = cfgmod.load_config(p)
        assert cfgmod.resolve(cfg, cfg["train"]["manifest"]) == tmp_path / "ds" / "manifest.json"

    @pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[train]\nnope = 1\n", "[train]\nsteps = many\n",
                                      "no header\n", "[unet]\nantagonist_enabled = maybe\n"])
    def test_bad_file(self, tmp_path, text):
        with pytest.raises(ConfigError):
            cfgmod.load_config(write(tmp_path, text))

    @pytest.mark.parametrize("item", ["steps=3", "train.steps", "train.unknown=1"])
    def test_bad_override(self, item):
        with pytest.raises(ConfigError):
            cfgmod.load_config(None, [item])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            cfgmod.load_config(tmp_path / "absent.ini")


class TestBuilders:
    def test_sub_configs(self):
        cfg = cfgmod.load_config(None, ["augment.resolution=16", "unet.base_channels=8", "train.w=1.5"])
        assert cfgmod.augment_config(cfg).resolution == 16
        u = cfgmod.unet_config(cfg, 16)
        assert (u.resolution, u.base_channels) == (16, 8)
        assert cfgmod.guidance_config(cfg).w == 1.5

    def test_echo_is_json_friendly(self):
        import json

        echoed = cfgmod.echo(cfgmod.load_config())
        assert "_base" not in echoed
        assert json.loads(json.dumps(echoed))["unet"]["channel_mult"] == [1, 2, 4]
