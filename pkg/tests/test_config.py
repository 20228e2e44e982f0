import pytest

from ramrestore.config import RunConfig, parse_config
from ramrestore.errors import BadValue, ConfigSyntaxError, UnknownKey


class TestParse:
    def test_empty_is_defaults(self):
        cfg = parse_config("")
        assert cfg == RunConfig()
        assert cfg.pretrain_config().validate().mask_ratio == 0.5
        assert cfg.finetune_config().validate().lr_min == 1e-7

    def test_values(self):
        cfg = parse_config(
            "seed = 7  # global\n"
            "[model]\nwidth = 16\n"
            "[pretrain]\nratio = 0.75\npatch = 4\n"
            "[data]\nkinds = noise, jpeg\nweights = 1, 3\n"
            "[mac]\nsigned = true\nreadout = l1\n"
        )
        assert cfg.seed == 7
        assert cfg.model_config().width == 16
        p = cfg.pretrain_config()
        assert (p.mask_ratio, p.mask_patch, p.kinds, p.weights, p.seed) == (0.75, 4, ("noise", "jpeg"), (1.0, 3.0), 7)
        assert cfg.mac_config().signed and cfg.mac_config().readout == "l1"

    def test_bad_ratio(self):
        with pytest.raises(BadValue):
            parse_config("[pretrain]\nratio = 1.5\n")

    def test_unknown_key(self):
        with pytest.raises(UnknownKey):
            parse_config("[pretrain]\nratoi = 0.5\n")
        with pytest.raises(UnknownKey):
            parse_config("[training]\n")
        with pytest.raises(UnknownKey):
            parse_config("width = 3\n")

    def test_syntax_error_line(self):
        with pytest.raises(ConfigSyntaxError) as exc:
            parse_config("[model]\nwidth = 8\njust words\n")
        assert exc.value.line == 3
        with pytest.raises(ConfigSyntaxError):
            parse_config("[model\n")

    def test_duplicate(self):
        with pytest.raises(ConfigSyntaxError):
            parse_config("[model]\nwidth = 8\nwidth = 9\n")

    @pytest.mark.parametrize("text", [
        "[pretrain]\nlr_max = 1e-5\nlr_min = 1e-4\n",
        "[data]\nkinds = noise, fog\n",
        "[data]\nkinds = noise\nweights = 1, 2\n",
        "[model]\nwidth = two\n",
        "[mac]\nsigned = maybe\n",
        "[data]\nimage_size = 30\n[pretrain]\npatch = 4\n",
    ])
    def test_bad_values(self, text):
        with pytest.raises(BadValue):
            parse_config(text)

    def test_round_trip(self):
        text = "seed = 3\n[mac]\nk_percent = 34\ndelta = 1e6\n[data]\nkinds = rain\n[ablate]\nseeds = 0, 1, 2\n"
        cfg = parse_config(text)
        assert parse_config(cfg.echo()) == cfg
        assert parse_config(RunConfig().echo()) == RunConfig()

    def test_seed_override(self):
        cfg = parse_config("seed = 3\n").with_seed(11)
        assert cfg.seed == 11 and "seed = 11" in cfg.echo()
        assert cfg.pipeline().pretrain.seed == 11
