"""Run configuration: defaults, parsing, validation, flat round trips."""

import pytest

from madseg.anomaly_sim import SimConfig
from madseg.config import (
    default_config,
    default_config_text,
    from_flat,
    parse_file,
    parse_text,
)
from madseg.errors import ConfigurationError
from madseg.trainer import TrainConfig


class TestDefaults:
    @pytest.mark.parametrize(
        "section,key,expected",
        [
            ("train", "steps", 500),
            ("train", "batch_size", 8),
            ("train", "lr0", 0.003),
            ("train", "warmup_steps", 50),
            ("train", "image_size", 256),
            ("train", "memory_n", 30),
            ("train", "occ_count", 2),
            ("train", "labeler_refresh_every", 50),
            ("train", "plateau_patience", 5),
            ("train", "plateau_min_delta", 0.001),
            ("train", "image_score", "max"),
            ("loss", "w_l1", 0.6),
            ("loss", "w_focal", 0.4),
            ("loss", "gamma", 4.0),
            ("loss", "alpha", 0.25),
            ("simulate", "delta_lo", 0.15),
            ("simulate", "delta_hi", 1.0),
            ("simulate", "texture_prob", 0.5),
            ("eval", "heatmaps", False),
        ],
    )
    def test_documented_default(self, section, key, expected):
        assert default_config().get(section, key) == expected

    def test_default_builders_match_dataclass_defaults(self):
        cfg = default_config()
        assert cfg.train_config() == TrainConfig()
        assert cfg.sim_config() == SimConfig()

    def test_default_text_round_trips(self):
        """The emitted template parses back to exactly the defaults."""
        assert parse_text(default_config_text()).values == default_config().values

    def test_default_text_mentions_every_key(self):
        text = default_config_text()
        for section, keys in default_config().values.items():
            assert f"[{section}]" in text
            for key in keys:
                assert key in text


class TestParsing:
    def test_overrides_apply(self):
        cfg = parse_text("[train]\nsteps = 7\nlr0 = 0.01\n[eval]\nheatmaps = yes\n")
        assert cfg.get("train", "steps") == 7
        assert cfg.get("train", "lr0") == 0.01
        assert cfg.eval_heatmaps() is True
        # untouched keys keep their defaults
        assert cfg.get("train", "batch_size") == 8

    def test_inline_comments_are_stripped(self):
        cfg = parse_text("[train]\nsteps = 9  # just a smoke run\n")
        assert cfg.get("train", "steps") == 9

    def test_empty_document_is_all_defaults(self):
        assert parse_text("").values == default_config().values

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ConfigurationError, match="train.bogus: unknown key"):
            parse_text("[train]\nbogus = 1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown config section"):
            parse_text("[nonsense]\nx = 1\n")

    def test_syntax_error_rejected(self):
        with pytest.raises(ConfigurationError, match="syntax"):
            parse_text("steps = 1\n")  # key before any section header

    @pytest.mark.parametrize(
        "doc,fragment",
        [
            ("[train]\nsteps = abc\n", "train.steps"),
            ("[train]\nsteps = 0\n", "must be >= 1"),
            ("[train]\nbatch_size = 7\n", "must be even"),
            ("[train]\nimage_score = mean\n", "train.image_score"),
            ("[train]\nuse_msff = maybe\n", "boolean"),
            ("[loss]\nalpha = 0\n", "must be > 0"),
            ("[loss]\nalpha = 1.5\n", "must be <= 1"),
            ("[simulate]\ndelta_lo = -0.1\n", "simulate.delta_lo"),
        ],
    )
    def test_bad_value_reports_its_path(self, doc, fragment):
        with pytest.raises(ConfigurationError, match=fragment):
            parse_text(doc)


class TestFlatRoundTrip:
    def test_to_flat_from_flat(self):
        cfg = parse_text("[train]\nsteps = 11\nseed = 3\n[loss]\ngamma = 2\n")
        restored = from_flat(cfg.to_flat())
        assert restored.values == cfg.values

    def test_flat_keys_are_dotted_paths(self):
        flat = default_config().to_flat()
        assert flat["train.steps"] == 500
        assert flat["loss.gamma"] == 4.0
        assert all("." in key for key in flat)

    def test_malformed_flat_key_rejected(self):
        with pytest.raises(ConfigurationError, match="malformed"):
            from_flat({"steps": 1})


class TestAccessorsAndBuilders:
    def test_set_coerces_and_validates(self):
        cfg = default_config()
        cfg.set("train", "steps", "12")
        assert cfg.get("train", "steps") == 12
        with pytest.raises(ConfigurationError, match="train.steps"):
            cfg.set("train", "steps", "-3")

    def test_require_dataset(self):
        cfg = default_config()
        with pytest.raises(ConfigurationError, match="dataset.root"):
            cfg.require_dataset()
        cfg.set("dataset", "root", "/data")
        cfg.set("dataset", "category", "stripes")
        cfg.require_dataset()

    def test_train_config_carries_overrides(self):
        cfg = parse_text(
            "[train]\nsteps = 9\nbatch_size = 4\nwarmup_steps = 2\n"
            "[simulate]\ndelta_lo = 0.4\n"
            "[dataset]\nperturb = false\n"
        )
        tc = cfg.train_config()
        assert tc.steps == 9
        assert tc.batch_size == 4
        assert tc.sim.delta_range == (0.4, 1.0)
        assert tc.perturb is False

    def test_train_config_cross_field_validation(self):
        with pytest.raises(ConfigurationError, match="warmup"):
            parse_text("[train]\nsteps = 5\nwarmup_steps = 9\n").train_config()


class TestParseFile:
    def test_reads_a_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[train]\nsteps = 4\n")
        assert parse_file(path).get("train", "steps") == 4

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            parse_file(tmp_path / "absent.cfg")
