"""Experiment configuration: flat ``dotted.key = value`` text files.

Lists are comma separated.  ``output.dir`` is excluded from the config hash;
every other key participates.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import KINDS, AugmentationSpec

DEFAULT_ARMS = (
    "lstm_krauss",
    "notl_fc25_ce", "notl_fc25_rce", "tl_fc25_ce", "tl_fc25_rce",
    "notl_fc100_ce", "notl_fc100_rce", "tl_fc100_ce", "tl_fc100_rce",
)

AUGMENTATION_ARM_ORDER = (
    "feat_extrapolate", "feat_interpolate", "feat_noise", "feat_jitter",
    "inp_jitter", "inp_magnify", "inp_pool", "inp_timewarp",
)

_ARM_RE = re.compile(r"^(?P<kind>tl|notl)_fc(?P<n>\d+)_(?P<loss>ce|rce)(?:_(?P<aug>[a-z_]+))?$")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArmSpec:
    name: str
    kind: str  # "krauss", "transfer" or "baseline"
    n_hidden: int | None = None
    loss_kind: str = "CE"
    augmentation: str | None = None


def parse_arm(name: str) -> ArmSpec:
    if name == "lstm_krauss":
        return ArmSpec(name, "krauss")
    m = _ARM_RE.match(name)
    if not m:
        raise ConfigError(f"cannot parse arm name {name!r}")
    aug = m.group("aug")
    if aug is not None and aug not in KINDS:
        raise ConfigError(f"arm {name!r}: unknown augmentation {aug!r}")
    kind = "transfer" if m.group("kind") == "tl" else "baseline"
    if aug is not None and kind != "transfer":
        raise ConfigError(f"arm {name!r}: augmentation only applies to transfer arms")
    return ArmSpec(name, kind, int(m.group("n")),
                   "R+CE" if m.group("loss") == "rce" else "CE", aug)


@dataclass(frozen=True)
class ExperimentConfig:
    data_path: str = ""
    synthetic_n_days: int = 7000
    synthetic_n_stocks: int = 500
    synthetic_signal_strength: float = 0.5
    synthetic_seed: int = 0
    split_length: int = 1000
    split_stride: int = 250
    split_train_length: int = 750
    window: int = 240
    label_k: int = 10
    hidden_size: int = 25
    learning_rate: float = 1e-3
    batch_size: int = 128
    patience: int = 10
    max_epochs: int = 100
    val_fraction: float = 0.2
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    alpha: str = "auto"
    aug_lambda: float = 0.2
    aug_gamma: float = 0.5
    aug_sigma: float = 0.05
    aug_k_neighbors: int = 2
    aug_pool_window: int = 3
    aug_magnify_low: float = 0.4
    aug_magnify_high: float = 0.8
    aug_knots: int = 4
    aug_warp_sigma: float = 0.2
    portfolio_k: int = 10
    cost_bps: float = 5.0
    seed: int = 0
    seeds: tuple = (1, 2, 3)
    arms: tuple = DEFAULT_ARMS
    output_dir: str = field(default="runs/default", compare=False)

    def __post_init__(self):
        for name in self.arms:
            parse_arm(name)
        if len(set(self.arms)) != len(self.arms):
            raise ConfigError("duplicate arm names")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.alpha != "auto":
            try:
                if float(self.alpha) < 0:
                    raise ConfigError("alpha must be non-negative")
            except ValueError:
                raise ConfigError(f"alpha must be 'auto' or a number, got {self.alpha!r}") from None

    @property
    def alpha_value(self):
        return None if self.alpha == "auto" else float(self.alpha)

    @property
    def cost_per_trade(self) -> float:
        return self.cost_bps * 1e-4

    def arm_specs(self):
        return [parse_arm(a) for a in self.arms]

    def augmentation_spec(self, kind: str, seed: int) -> AugmentationSpec:
        return AugmentationSpec(
            kind=kind, lam=self.aug_lambda, gamma=self.aug_gamma, sigma=self.aug_sigma,
            k_neighbors=self.aug_k_neighbors, pool_window=self.aug_pool_window,
            magnify_low=self.aug_magnify_low, magnify_high=self.aug_magnify_high,
            knots=self.aug_knots, warp_sigma=self.aug_warp_sigma, seed=seed)

    def to_text(self, include_output=True) -> str:
        lines = []
        for f in fields(self):
            if f.name == "output_dir" and not include_output:
                continue
            lines.append(f"{_KEYS[f.name]} = {_format(getattr(self, f.name))}")
        return "\n".join(sorted(lines)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text(include_output=False).encode()).hexdigest()[:16]

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


# field name -> dotted key
_KEYS = {
    "data_path": "data.path",
    "synthetic_n_days": "synthetic.n_days",
    "synthetic_n_stocks": "synthetic.n_stocks",
    "synthetic_signal_strength": "synthetic.signal_strength",
    "synthetic_seed": "synthetic.seed",
    "split_length": "split.length",
    "split_stride": "split.stride",
    "split_train_length": "split.train_length",
    "window": "split.window",
    "label_k": "labels.k",
    "hidden_size": "model.hidden_size",
    "learning_rate": "train.learning_rate",
    "batch_size": "train.batch_size",
    "patience": "train.patience",
    "max_epochs": "train.max_epochs",
    "val_fraction": "train.val_fraction",
    "rmsprop_rho": "train.rmsprop_rho",
    "rmsprop_eps": "train.rmsprop_eps",
    "alpha": "loss.alpha",
    "aug_lambda": "augment.lambda",
    "aug_gamma": "augment.gamma",
    "aug_sigma": "augment.sigma",
    "aug_k_neighbors": "augment.k_neighbors",
    "aug_pool_window": "augment.pool_window",
    "aug_magnify_low": "augment.magnify_low",
    "aug_magnify_high": "augment.magnify_high",
    "aug_knots": "augment.knots",
    "aug_warp_sigma": "augment.warp_sigma",
    "portfolio_k": "portfolio.k",
    "cost_bps": "portfolio.cost_bps",
    "seed": "run.seed",
    "seeds": "run.seeds",
    "arms": "run.arms",
    "output_dir": "output.dir",
}
_FIELDS = {v: k for k, v in _KEYS.items()}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, raw: str):
    kind = _TYPES[name]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(int(s) for s in items) if name == "seeds" else tuple(items)
    return raw


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    preset = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            preset = raw
            continue
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[_FIELDS[key]] = _parse(_FIELDS[key], raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    if base is None:
        base = preset_config(preset) if preset else ExperimentConfig()
    elif preset:
        base = preset_config(preset)
    return replace(base, **values)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def save_config(config: ExperimentConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_text(), encoding="utf-8")


DESK_ARMS = (
    "lstm_krauss", "notl_fc25_rce", "tl_fc25_ce", "tl_fc25_rce",
    *(f"tl_fc25_rce_{k}" for k in AUGMENTATION_ARM_ORDER),
)


def preset_config(name: str | None) -> ExperimentConfig:
    if name in (None, "", "full"):
        return ExperimentConfig()
    if name == "desk":
        return ExperimentConfig(
            synthetic_n_days=1500, synthetic_n_stocks=40, synthetic_signal_strength=0.5,
            hidden_size=8, max_epochs=6, arms=DESK_ARMS, output_dir="runs/desk")
    raise ConfigError(f"unknown preset {name!r}")
