"""Flat key=value experiment configs and the bundled preset catalog.

Config files are plain text: one ``key = value`` per line, ``#`` comments,
unknown keys rejected with a nearest-key suggestion. The preset catalog
covers every shortcut-ablation row and every activation ordering studied, at
the reference depth 110 (plus the 164-layer bottleneck companion), and a
desk-scale smoke preset.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field

from .network import NetworkConfig
from .train import TrainConfig
from .units import (
    ActivationOrder,
    BranchShape,
    ConstantScale,
    Conv1x1,
    DropoutShortcut,
    ExclusiveGate,
    Identity,
    ShortcutKind,
    ShortcutOnlyGate,
)


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    if not s.strip():
        return ()
    return tuple(int(p.strip()) for p in s.split(","))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# key -> (parser, default). Parsing is total over this table; anything else
# is an unknown-key error.
KEYS: dict[str, tuple] = {
    "network.depth": (int, 20),
    "network.branch": (str, "basic"),
    "network.order": (str, "full-preact"),
    "network.shortcut": (str, "identity"),
    "network.shortcut_lambda": (float, 0.5),
    "network.branch_scale": (float, 1.0),
    "network.gate_bias": (float, 0.0),
    "network.dropout_rate": (float, 0.5),
    "network.widths": (_parse_int_list, (16, 32, 64)),
    "network.num_classes": (int, 10),
    "network.input_size": (int, 32),
    "network.zero_pad_boundary": (_parse_bool, False),
    "train.lr": (float, 0.1),
    "train.warmup": (_parse_bool, True),
    "train.warmup_lr": (float, 0.01),
    "train.warmup_iters": (int, 400),
    "train.decay_points": (_parse_int_list, (32000, 48000)),
    "train.decay_factor": (float, 0.1),
    "train.total_iters": (int, 64000),
    "train.weight_decay": (float, 1e-4),
    "train.momentum": (float, 0.9),
    "train.batch_size": (int, 128),
    "train.augment": (_parse_bool, True),
    "train.uniform_decay": (_parse_bool, False),
    "train.log_every": (int, 100),
    "train.eval_every": (int, 1000),
    "data.dataset": (str, "cifar10"),
    "data.dir": (str, "./data"),
    "data.subset": (int, 0),
    "data.subset_seed": (int, 0),
    "data.synthetic_n": (int, 2000),
    "data.synthetic_size": (int, 32),
    "data.synthetic_seed": (int, 0),
    "data.synthetic_noise": (float, 1.0),
    "run.seeds": (_parse_int_list, (7,)),
    "run.out": (str, "runs/exp"),
    "run.deterministic": (_parse_bool, False),
    "run.checkpoint_every": (int, 0),
    "analysis.telescope": (_parse_bool, True),
    "analysis.decompose": (_parse_bool, True),
    "analysis.lambda_check": (_parse_bool, False),
    "analysis.profile": (_parse_bool, True),
    "analysis.slice": (str, "auto"),
    "analysis.batch": (int, 8),
}

SHORTCUT_NAMES = ("identity", "constant", "exclusive-gate", "shortcut-only-gate",
                  "conv1x1", "dropout")
ORDER_NAMES = tuple(o.value for o in ActivationOrder)
BRANCH_NAMES = ("basic", "bottleneck", "single")


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values.get(key, KEYS[key][1])

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def to_text(self) -> str:
        lines = []
        section = ""
        for key in KEYS:
            if key not in self.values:
                continue
            sec = key.split(".")[0]
            if sec != section:
                if section:
                    lines.append("")
                section = sec
            lines.append(f"{key} = {_fmt(self.values[key])}")
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KEYS:
            close = difflib.get_close_matches(key, KEYS.keys(), n=1)
            hint = f"; closest valid key is {close[0]!r}" if close else ""
            raise ConfigError(f"line {lineno}: unknown key {key!r}{hint}")
        parser = KEYS[key][0]
        try:
            cfg.values[key] = parser(value)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def _validate(cfg: ExperimentConfig) -> None:
    if cfg["network.shortcut"] not in SHORTCUT_NAMES:
        raise ConfigError(f"network.shortcut must be one of {SHORTCUT_NAMES}, "
                          f"got {cfg['network.shortcut']!r}")
    if cfg["network.order"] not in ORDER_NAMES:
        raise ConfigError(f"network.order must be one of {ORDER_NAMES}, got {cfg['network.order']!r}")
    if cfg["network.branch"] not in BRANCH_NAMES:
        raise ConfigError(f"network.branch must be one of {BRANCH_NAMES}, got {cfg['network.branch']!r}")
    if cfg["data.dataset"] not in ("cifar10", "cifar100", "synthetic"):
        raise ConfigError(f"data.dataset must be cifar10, cifar100 or synthetic, "
                          f"got {cfg['data.dataset']!r}")
    if len(cfg["network.widths"]) != 3:
        raise ConfigError(f"network.widths needs exactly three entries, got {cfg['network.widths']}")
    if not cfg["run.seeds"]:
        raise ConfigError("run.seeds must list at least one seed")


def shortcut_from_config(cfg: ExperimentConfig) -> ShortcutKind:
    name = cfg["network.shortcut"]
    if name == "identity":
        return Identity()
    if name == "constant":
        return ConstantScale(cfg["network.shortcut_lambda"])
    if name == "exclusive-gate":
        return ExclusiveGate(cfg["network.gate_bias"])
    if name == "shortcut-only-gate":
        return ShortcutOnlyGate(cfg["network.gate_bias"])
    if name == "conv1x1":
        return Conv1x1()
    return DropoutShortcut(cfg["network.dropout_rate"])


def network_config(cfg: ExperimentConfig) -> NetworkConfig:
    branch = {"basic": BranchShape.BASIC, "bottleneck": BranchShape.BOTTLENECK,
              "single": BranchShape.SINGLE_LAYER}[cfg["network.branch"]]
    scale = cfg["network.branch_scale"]
    size = cfg["network.input_size"]
    return NetworkConfig(
        depth=cfg["network.depth"],
        branch=branch,
        shortcut=shortcut_from_config(cfg),
        order=ActivationOrder(cfg["network.order"]),
        widths=tuple(cfg["network.widths"]),
        num_classes=cfg["network.num_classes"],
        input_size=(size, size),
        branch_scale=None if scale == 1.0 else scale,
        zero_pad_boundary=cfg["network.zero_pad_boundary"],
    )


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        lr_initial=cfg["train.lr"],
        warmup=cfg["train.warmup"],
        warmup_lr=cfg["train.warmup_lr"],
        warmup_iters=cfg["train.warmup_iters"],
        decay_points=tuple(cfg["train.decay_points"]),
        decay_factor=cfg["train.decay_factor"],
        total_iters=cfg["train.total_iters"],
        weight_decay=cfg["train.weight_decay"],
        momentum=cfg["train.momentum"],
        batch_size=cfg["train.batch_size"],
        seed=seed,
        augment=cfg["train.augment"],
        uniform_decay=cfg["train.uniform_decay"],
        log_every=cfg["train.log_every"],
        eval_every=cfg["train.eval_every"],
    )


# ---------------------------------------------------------------------------
# Preset catalog
# ---------------------------------------------------------------------------

_REFERENCE_110 = {
    "network.depth": 110, "network.branch": "basic", "network.order": "original",
    "run.seeds": (1, 2, 3, 4, 5),
}

# One preset per studied shortcut-ablation row (ResNet-110, original ordering).
SHORTCUT_ABLATION_PRESETS = {
    "table1-original": {"network.shortcut": "identity"},
    "table1-const-0": {"network.shortcut": "constant", "network.shortcut_lambda": 0.0},
    "table1-const-0.5": {"network.shortcut": "constant", "network.shortcut_lambda": 0.5},
    "table1-const-0.5-f0.5": {"network.shortcut": "constant", "network.shortcut_lambda": 0.5,
                              "network.branch_scale": 0.5},
    "table1-exgate-b0": {"network.shortcut": "exclusive-gate", "network.gate_bias": 0.0},
    "table1-exgate-b-6": {"network.shortcut": "exclusive-gate", "network.gate_bias": -6.0},
    "table1-exgate-b-7": {"network.shortcut": "exclusive-gate", "network.gate_bias": -7.0},
    "table1-gateonly-b0": {"network.shortcut": "shortcut-only-gate", "network.gate_bias": 0.0},
    "table1-gateonly-b-6": {"network.shortcut": "shortcut-only-gate", "network.gate_bias": -6.0},
    "table1-conv1x1": {"network.shortcut": "conv1x1"},
    "table1-dropout": {"network.shortcut": "dropout", "network.dropout_rate": 0.5},
}

# One preset per activation ordering (ResNet-110, identity shortcuts).
ORDER_ABLATION_PRESETS = {
    f"table2-{order}-110": {"network.order": order, "network.shortcut": "identity"}
    for order in ORDER_NAMES
}

EXTRA_PRESETS = {
    # 164-layer bottleneck companion of the best ordering; the overnight
    # full-data reproduction target.
    "table2-fullpreact-164": {
        "network.depth": 164, "network.branch": "bottleneck",
        "network.order": "full-preact", "network.shortcut": "identity",
        "run.seeds": (1, 2, 3, 4, 5),
    },
    # Desk-scale CI smoke: synthetic data, tiny net, minutes on a laptop.
    "smoke": {
        "network.depth": 8, "network.widths": (8, 16, 32), "network.input_size": 16,
        "network.order": "full-preact", "network.shortcut": "identity",
        "data.dataset": "synthetic", "data.synthetic_n": 512, "data.synthetic_size": 16,
        "train.total_iters": 500, "train.batch_size": 32, "train.warmup": False,
        "train.augment": False, "train.log_every": 50, "train.eval_every": 250,
        "run.seeds": (7,),
    },
}


def preset_catalog() -> dict[str, dict]:
    catalog = {}
    for name, overrides in SHORTCUT_ABLATION_PRESETS.items():
        catalog[name] = {**_REFERENCE_110, **overrides}
    for name, overrides in ORDER_ABLATION_PRESETS.items():
        catalog[name] = {**_REFERENCE_110, **overrides}
    for name, overrides in EXTRA_PRESETS.items():
        catalog[name] = dict(overrides)
    return catalog


def preset_config(name: str) -> ExperimentConfig:
    catalog = preset_catalog()
    if name not in catalog:
        close = difflib.get_close_matches(name, catalog.keys(), n=1)
        hint = f"; closest is {close[0]!r}" if close else ""
        raise ConfigError(f"unknown preset {name!r}{hint}")
    cfg = ExperimentConfig(dict(catalog[name]))
    _validate(cfg)
    return cfg
