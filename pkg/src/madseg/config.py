"""Flat typed key-value run configuration.

A run config is an INI-style document with five sections — [dataset],
[simulate], [train], [loss], [eval] — whose keys are all scalars.  Unknown
sections or keys are hard errors, and every out-of-range value is reported
with its ``section.key`` path.  Every key has a documented default;
:func:`default_config_text` emits a fully commented file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .anomaly_sim import SimConfig
from .errors import ConfigurationError
from .losses import LossWeights
from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class _Field:
    default: Any
    parse: Callable[[Any], Any]
    help: str


def _bool() -> Callable[[Any], bool]:
    def fn(raw: Any) -> bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")

    return fn


def _int(lo: int | None = None, hi: int | None = None, even: bool = False):
    def fn(raw: Any) -> int:
        try:
            value = int(str(raw).strip())
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
        if lo is not None and value < lo:
            raise ValueError(f"must be >= {lo}, got {value}")
        if hi is not None and value > hi:
            raise ValueError(f"must be <= {hi}, got {value}")
        if even and value % 2 != 0:
            raise ValueError(f"must be even, got {value}")
        return value

    return fn


def _float(
    lo: float | None = None,
    hi: float | None = None,
    lo_open: bool = False,
):
    def fn(raw: Any) -> float:
        try:
            value = float(str(raw).strip())
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}") from None
        if lo is not None:
            if lo_open and value <= lo:
                raise ValueError(f"must be > {lo}, got {value}")
            if not lo_open and value < lo:
                raise ValueError(f"must be >= {lo}, got {value}")
        if hi is not None and value > hi:
            raise ValueError(f"must be <= {hi}, got {value}")
        return value

    return fn


def _str(choices: tuple[str, ...] | None = None):
    def fn(raw: Any) -> str:
        value = str(raw).strip()
        if choices is not None and value not in choices:
            raise ValueError(f"must be one of {choices}, got {value!r}")
        return value

    return fn


SCHEMA: dict[str, dict[str, _Field]] = {
    "dataset": {
        "root": _Field("", _str(), "dataset root directory"),
        "category": _Field("", _str(), "category subdirectory to use"),
        "texture_dir": _Field("", _str(), "directory of texture images for simulation (optional)"),
        "perturb": _Field(True, _bool(), "photometrically perturb source images"),
        "perturb_sigma_lo": _Field(0.0, _float(lo=0.0), "min noise stddev"),
        "perturb_sigma_hi": _Field(0.05, _float(lo=0.0), "max noise stddev"),
        "perturb_contrast_lo": _Field(0.8, _float(lo=0.0, lo_open=True), "min contrast factor"),
        "perturb_contrast_hi": _Field(1.2, _float(lo=0.0, lo_open=True), "max contrast factor"),
    },
    "simulate": {
        "delta_lo": _Field(0.15, _float(lo=0.0, hi=1.0), "min blend opacity"),
        "delta_hi": _Field(1.0, _float(lo=0.0, hi=1.0), "max blend opacity"),
        "perlin_threshold": _Field(0.5, _float(lo=-1.0, hi=1.0), "field binarization threshold"),
        "bg_threshold": _Field(0.05, _float(lo=0.0, hi=1.0), "foreground luminance threshold"),
        "bg_invert": _Field(False, _bool(), "invert the foreground estimate"),
        "use_foreground_mask": _Field(True, _bool(), "intersect blobs with the foreground"),
        "texture_prob": _Field(0.5, _float(lo=0.0, hi=1.0), "probability of texture (vs structure) noise"),
        "structure_grid": _Field(8, _int(lo=1), "patch grid for structure noise"),
        "perlin_min_exp": _Field(0, _int(lo=0), "min power-of-two lattice frequency"),
        "perlin_max_exp": _Field(5, _int(lo=0), "max power-of-two lattice frequency"),
        "max_mask_retries": _Field(5, _int(lo=1), "redraws before flagging a degenerate mask"),
    },
    "train": {
        "steps": _Field(500, _int(lo=1), "optimizer steps"),
        "batch_size": _Field(8, _int(lo=2, even=True), "batch size (half normal, half simulated)"),
        "lr0": _Field(0.003, _float(lo=0.0, lo_open=True), "peak learning rate"),
        "warmup_steps": _Field(50, _int(lo=0), "linear warmup steps"),
        "image_size": _Field(256, _int(lo=16), "square input side (multiple of 16)"),
        "base_width": _Field(32, _int(lo=1), "channel width multiplier"),
        "memory_n": _Field(30, _int(lo=1), "memory bank entries"),
        "refresh_memory_every": _Field(0, _int(lo=0), "steps between memory rebuilds (0 = never)"),
        "occ_count": _Field(2, _int(lo=1), "committee size"),
        "occ_components": _Field(3, _int(lo=1), "mixture components per scorer"),
        "occ_fit_includes_sim": _Field(True, _bool(), "fit scorers on simulated + normal features"),
        "negative_against_upper": _Field(False, _bool(), "alternative normal-side decision rule"),
        "labeler_refresh_every": _Field(50, _int(lo=1), "steps between committee refits"),
        "labeler_pool": _Field(48, _int(lo=6), "simulated pool size per refit"),
        "labeled_fraction": _Field(0.2, _float(lo=0.0, lo_open=True, hi=1.0), "fraction routed to the labeled-anomalous set"),
        "projection_dim": _Field(16, _int(lo=1), "latent projection dimension for scorers"),
        "plateau_window": _Field(25, _int(lo=1), "loss window length (steps)"),
        "plateau_patience": _Field(5, _int(lo=1), "stalled windows before stopping"),
        "plateau_min_delta": _Field(0.001, _float(lo=0.0), "required windowed-loss improvement"),
        "seed": _Field(0, _int(), "master seed"),
        "use_msff": _Field(True, _bool(), "enable multi-scale fusion"),
        "use_attention": _Field(True, _bool(), "enable attention gating"),
        "use_ca": _Field(False, _bool(), "enable coordinate attention in fusion"),
        "image_score": _Field("max", _str(("max", "top1pct")), "image score from the map"),
    },
    "loss": {
        "w_l1": _Field(0.6, _float(lo=0.0), "weight of the L1 pixel term"),
        "w_focal": _Field(0.4, _float(lo=0.0), "weight of the focal pixel term"),
        "gamma": _Field(4.0, _float(lo=0.0), "focal exponent"),
        "alpha": _Field(0.25, _float(lo=0.0, lo_open=True, hi=1.0), "focal scale"),
    },
    "eval": {
        "heatmaps": _Field(False, _bool(), "export per-image heatmaps"),
        "pixel_metrics": _Field(False, _bool(), "also compute pixel-level AUROC"),
    },
}


@dataclass
class RunConfig:
    """Typed view of one parsed config document."""

    values: dict[str, dict[str, Any]]

    # ----- accessors -----------------------------------------------------
    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def set(self, section: str, key: str, raw: Any) -> None:
        """Type-check and set one value (used for CLI overrides)."""
        field = _lookup(section, key)
        try:
            self.values[section][key] = field.parse(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{section}.{key}: {exc}") from None

    @property
    def dataset_root(self) -> str:
        return self.values["dataset"]["root"]

    @property
    def category(self) -> str:
        return self.values["dataset"]["category"]

    @property
    def texture_dir(self) -> str:
        return self.values["dataset"]["texture_dir"]

    def require_dataset(self) -> None:
        if not self.dataset_root or not self.category:
            raise ConfigurationError(
                "dataset.root and dataset.category must be set for this command"
            )

    # ----- builders ------------------------------------------------------
    def sim_config(self) -> SimConfig:
        s = self.values["simulate"]
        return SimConfig(
            delta_range=(s["delta_lo"], s["delta_hi"]),
            perlin_threshold=s["perlin_threshold"],
            bg_threshold=s["bg_threshold"],
            bg_invert=s["bg_invert"],
            use_foreground_mask=s["use_foreground_mask"],
            texture_prob=s["texture_prob"],
            structure_grid=s["structure_grid"],
            perlin_min_exp=s["perlin_min_exp"],
            perlin_max_exp=s["perlin_max_exp"],
            max_mask_retries=s["max_mask_retries"],
        )

    def loss_weights(self) -> LossWeights:
        l = self.values["loss"]
        return LossWeights(
            w_l1=l["w_l1"], w_focal=l["w_focal"], gamma=l["gamma"], alpha=l["alpha"]
        )

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        d = self.values["dataset"]
        cfg = TrainConfig(
            steps=t["steps"],
            batch_size=t["batch_size"],
            lr0=t["lr0"],
            warmup_steps=t["warmup_steps"],
            image_size=t["image_size"],
            base_width=t["base_width"],
            memory_n=t["memory_n"],
            refresh_memory_every=t["refresh_memory_every"],
            occ_count=t["occ_count"],
            occ_components=t["occ_components"],
            occ_fit_includes_sim=t["occ_fit_includes_sim"],
            negative_against_upper=t["negative_against_upper"],
            labeler_refresh_every=t["labeler_refresh_every"],
            labeler_pool=t["labeler_pool"],
            labeled_fraction=t["labeled_fraction"],
            projection_dim=t["projection_dim"],
            plateau_window=t["plateau_window"],
            plateau_patience=t["plateau_patience"],
            plateau_min_delta=t["plateau_min_delta"],
            seed=t["seed"],
            use_msff=t["use_msff"],
            use_attention=t["use_attention"],
            use_ca=t["use_ca"],
            image_score=t["image_score"],
            perturb=d["perturb"],
            perturb_sigma=(d["perturb_sigma_lo"], d["perturb_sigma_hi"]),
            perturb_contrast=(d["perturb_contrast_lo"], d["perturb_contrast_hi"]),
            loss=self.loss_weights(),
            sim=self.sim_config(),
        )
        cfg.validate()
        return cfg

    def eval_heatmaps(self) -> bool:
        return self.values["eval"]["heatmaps"]

    def eval_pixel_metrics(self) -> bool:
        return self.values["eval"]["pixel_metrics"]

    def to_flat(self) -> dict[str, Any]:
        """Flat ``section.key -> value`` mapping (checkpoint snapshot form)."""
        return {
            f"{section}.{key}": value
            for section, keys in sorted(self.values.items())
            for key, value in sorted(keys.items())
        }


def _lookup(section: str, key: str) -> _Field:
    if section not in SCHEMA:
        raise ConfigurationError(f"unknown config section: [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigurationError(f"{section}.{key}: unknown key")
    return SCHEMA[section][key]


def default_config() -> RunConfig:
    """A config carrying every documented default."""
    return RunConfig(
        values={
            section: {key: field.default for key, field in keys.items()}
            for section, keys in SCHEMA.items()
        }
    )


def parse_text(text: str) -> RunConfig:
    """Parse a config document, applying defaults for missing keys."""
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";")
    )
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config syntax error: {exc}") from exc
    cfg = default_config()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section: [{section}]")
        for key, raw in parser.items(section):
            cfg.set(section, key, raw)
    return cfg


def parse_file(path: str | Path) -> RunConfig:
    """Parse a config file; missing file is a configuration error."""
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return parse_text(p.read_text())


def from_flat(flat: dict[str, Any]) -> RunConfig:
    """Rebuild a config from its flat snapshot (e.g. out of a checkpoint)."""
    cfg = default_config()
    for path, value in flat.items():
        if "." not in path:
            raise ConfigurationError(f"malformed config key: {path!r}")
        section, key = path.split(".", 1)
        cfg.set(section, key, value)
    return cfg


def default_config_text() -> str:
    """A fully commented config file holding every default."""
    lines = [
        "# Run configuration. Every key is optional; the values below are",
        "# the built-in defaults. Unknown sections or keys are rejected.",
        "",
    ]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, field in keys.items():
            default = field.default
            if isinstance(default, bool):
                default = "true" if default else "false"
            lines.append(f"{key} = {default}  # {field.help}")
        lines.append("")
    return "\n".join(lines)
