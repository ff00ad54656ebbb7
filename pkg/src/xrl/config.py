"""Flat dotted-key run configuration parsed from TOML plus command-line overrides."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attack import ExplAttackConfig, PgdConfig, GRAY_EPSILON, RGB_EPSILON
from .explain import ExplMethod
from .landscape import DEFAULT_GAMMAS
from .nn import ModelSpec, convnet_spec, linear_spec, mlp_spec, small_resnet_spec
from .train import TrainConfig


class ConfigError(ValueError):
    """Unknown, missing or ill-typed configuration key (a usage error)."""


_STR, _INT, _FLOAT, _BOOL, _LIST = str, int, float, bool, list

# key -> (type, default); a default of None means "unset"
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (_INT, 0),
    "out": (_STR, "out"),
    "data.format": (_STR, "idx"),
    "data.train_images": (_STR, None),
    "data.train_labels": (_STR, None),
    "data.test_images": (_STR, None),
    "data.test_labels": (_STR, None),
    "data.cifar_train": (_LIST, None),
    "data.cifar_test": (_LIST, None),
    "data.train_limit": (_INT, None),
    "data.test_limit": (_INT, None),
    "data.num_classes": (_INT, 10),
    "data.synth_per_class": (_INT, 20),
    "data.synth_test_per_class": (_INT, 10),
    "data.synth_side": (_INT, 12),
    "data.synth_noise": (_FLOAT, 0.1),
    "data.synth_channels": (_INT, 1),
    "model.arch": (_STR, "convnet"),
    "model.beta": (_FLOAT, 1.0),
    "model.pool": (_STR, "avg"),
    "model.channels": (_LIST, [32, 64, 64]),
    "model.width": (_INT, 16),
    "model.hidden": (_INT, 16),
    "model.checkpoint": (_STR, None),
    "train.regime": (_STR, "Normal"),
    "train.epochs": (_INT, 25),
    "train.batch_size": (_INT, 64),
    "train.learning_rate": (_FLOAT, 0.01),
    "train.alpha": (_FLOAT, 1.0),
    "train.lambda": (_FLOAT, 0.0),
    "train.sigma_zeta": (_FLOAT, 1.0),
    "train.zeta_per_image": (_BOOL, True),
    "train.holdout_fraction": (_FLOAT, 0.1),
    "train.pgd_warmup_epochs": (_INT, 0),
    "train.flatness_chunk": (_INT, 0),
    "pgd.epsilon": (_FLOAT, None),
    "pgd.steps": (_INT, 10),
    "pgd.step_size": (_FLOAT, None),
    "pgd.random_start": (_BOOL, True),
    "expl.method": (_STR, "GradientTimesInput"),
    "expl.ig_steps": (_INT, 32),
    "attack.epsilon": (_FLOAT, None),
    "attack.iterations": (_INT, 200),
    "attack.learning_rate": (_FLOAT, None),
    "attack.gamma_c": (_FLOAT, None),
    "attack.step_rule": (_STR, "sign"),
    "attack.chunk": (_INT, 64),
    "eval.k": (_INT, 10),
    "eval.per_cluster": (_INT, 3),
    "eval.pairset": (_STR, None),
    "eval.label": (_STR, None),
    "eval.with_attack": (_BOOL, True),
    "landscape.kind": (_STR, "Explanation"),
    "landscape.gammas": (_LIST, list(DEFAULT_GAMMAS)),
    "landscape.num_directions": (_INT, 5),
    "landscape.samples": (_INT, 500),
    "report.inputs": (_LIST, None),
}


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    typ = SCHEMA[key][0]
    if typ is _FLOAT and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is _LIST and isinstance(value, (list, tuple)):
        return list(value)
    if typ is _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key} expects true/false, got {value!r}")
        return value
    if not isinstance(value, typ) or (typ is _INT and isinstance(value, bool)):
        raise ConfigError(f"config key {key} expects {typ.__name__}, got {value!r}")
    return value


def parse_value(text: str):
    """A TOML literal (number, bool, array, quoted string) or else the bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # only explicitly set keys

    @classmethod
    def from_mapping(cls, flat: dict) -> "RunConfig":
        unknown = sorted(k for k in flat if k not in SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls({k: _coerce(k, v) for k, v in flat.items()})

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            tree = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config is not valid TOML: {e}") from e
        return cls.from_mapping(flatten(tree))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = dict(self.values)
        merged.update(RunConfig.from_mapping(overrides).values)
        return RunConfig(merged)

    def get(self, key: str):
        if key in self.values:
            return self.values[key]
        return SCHEMA[key][1]

    def __getitem__(self, key: str):
        return self.get(key)

    def require(self, *keys: str) -> None:
        for key in keys:
            if self.get(key) is None:
                raise ConfigError(f"missing required config key {key}")

    # -- builders -----------------------------------------------------------

    def channels(self) -> int:
        fmt = self["data.format"]
        if fmt == "cifar":
            return 3
        if fmt == "synth":
            return self["data.synth_channels"]
        return 1

    def default_epsilon(self) -> float:
        return GRAY_EPSILON if self.channels() == 1 else RGB_EPSILON

    def pgd(self) -> PgdConfig:
        eps = self["pgd.epsilon"]
        return PgdConfig(epsilon=self.default_epsilon() if eps is None else eps, steps=self["pgd.steps"],
                         step_size=self["pgd.step_size"], random_start=self["pgd.random_start"])

    def expl_method(self) -> ExplMethod:
        return ExplMethod(self["expl.method"], self["expl.ig_steps"])

    def expl_attack(self) -> ExplAttackConfig:
        eps = self["attack.epsilon"]
        return ExplAttackConfig(epsilon=self.pgd().epsilon if eps is None else eps,
                                iterations=self["attack.iterations"],
                                learning_rate=self["attack.learning_rate"], gamma_c=self["attack.gamma_c"],
                                step_rule=self["attack.step_rule"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(regime=self["train.regime"], epochs=self["train.epochs"],
                           batch_size=self["train.batch_size"], learning_rate=self["train.learning_rate"],
                           alpha=self["train.alpha"], lam=self["train.lambda"],
                           sigma_zeta=self["train.sigma_zeta"], zeta_per_image=self["train.zeta_per_image"],
                           pgd=self.pgd(), expl_method=self.expl_method(), seed=self["seed"],
                           holdout_fraction=self["train.holdout_fraction"],
                           pgd_warmup_epochs=self["train.pgd_warmup_epochs"],
                           flatness_chunk=self["train.flatness_chunk"])

    def model_spec(self, input_shape) -> ModelSpec:
        arch, k, beta = self["model.arch"], self["data.num_classes"], self["model.beta"]
        if arch == "convnet":
            return convnet_spec(input_shape, k, beta, self["model.pool"], tuple(self["model.channels"]))
        if arch == "resnet":
            return small_resnet_spec(input_shape, k, beta, self["model.pool"], self["model.width"])
        if arch == "mlp":
            return mlp_spec(input_shape, k, self["model.hidden"], beta)
        if arch == "linear":
            return linear_spec(input_shape, k)
        raise ConfigError(f"model.arch must be convnet, resnet, mlp or linear, got {arch!r}")

    def model_keys_set(self) -> bool:
        return any(k.startswith("model.") and k != "model.checkpoint" for k in self.values)
