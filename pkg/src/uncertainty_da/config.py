"""Flat, typed ``section.key = value`` experiment configuration.

One assignment per line, ``#`` starts a comment.  Values are Python literals
(``12``, ``0.5``, ``"two_moons"``, ``[128, 64]``) plus the bare words
``true``, ``false`` and ``none``.  Unknown keys and ill-typed values are
rejected with an error naming the key.
"""
from __future__ import annotations

import ast
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass(frozen=True)
class Option:
    kind: str  # int | float | bool | str | ints | floats | path
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    choices: tuple = ()
    optional: bool = False


def _opt(kind, default, check=None, rule="", choices=(), optional=False):
    return Option(kind, default, check, rule, choices, optional)


_pos = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_unit = (lambda v: 0 <= v <= 1, "must lie in [0, 1]")

SCHEMA: dict[str, Option] = {
    # dataset
    "dataset.kind": _opt("str", "two_moons", choices=("two_moons", "blobs", "csv", "idx")),
    "dataset.n_source": _opt("int", 1000, *_pos),
    "dataset.n_target": _opt("int", 1000, *_pos),
    "dataset.noise": _opt("float", 0.1, *_nonneg),
    "dataset.n_classes": _opt("int", 3, lambda v: v >= 2, "must be >= 2"),
    "dataset.dim": _opt("int", 2, *_pos),
    "dataset.separation": _opt("float", 4.0, *_pos),
    "dataset.rotation_deg": _opt("float", 40.0),
    "dataset.translation": _opt("floats", ()),
    "dataset.target_noise": _opt("float", 0.0, *_nonneg),
    "dataset.dropped_classes": _opt("ints", ()),
    "dataset.extra_noise_classes": _opt("int", 0, *_nonneg),
    "dataset.class_prior": _opt("floats", ()),
    "dataset.standardize": _opt("bool", None, optional=True),
    "dataset.source_csv": _opt("path", None, optional=True),
    "dataset.target_csv": _opt("path", None, optional=True),
    "dataset.source_images": _opt("path", None, optional=True),
    "dataset.source_labels": _opt("path", None, optional=True),
    "dataset.target_images": _opt("path", None, optional=True),
    "dataset.target_labels": _opt("path", None, optional=True),
    "dataset.source_limit": _opt("int", 2000, *_pos),
    "dataset.target_limit": _opt("int", 1800, *_pos),
    # model
    "model.feature_layers": _opt("ints", (128, 64)),
    "model.discriminator_layers": _opt("ints", (32,)),
    "model.dropout_p": _opt("float", 0.5, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "model.discriminator_dropout": _opt("bool", False),
    # train
    "train.epochs": _opt("int", 30, *_pos),
    "train.batch_size": _opt("int", 64, *_pos),
    "train.lr": _opt("float", 0.01, *_pos),
    "train.momentum": _opt("float", 0.9, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "train.weight_decay": _opt("float", 5e-4, *_nonneg),
    "train.seed": _opt("int", 0, *_nonneg),
    # method
    "method.mode": _opt("str", "uncertainty_full",
                        choices=("source_only", "adversarial_plain", "uncertainty_full")),
    "method.uncertainty_metric": _opt("str", "entropy", choices=("entropy", "variance")),
    "method.T": _opt("int", 12, *_pos),
    "method.tau": _opt("float", 1.5, *_pos),
    "method.tau_c": _opt("float", 1.8, *_pos),
    "method.t_u": _opt("float", 0.2, *_unit),
    "method.gamma": _opt("float", -10.0, lambda v: v < 0, "must be < 0"),
    "method.lambda_u_ratio": _opt("float", 0.25, *_nonneg),
    "method.discrepancy_q": _opt("int", 2, lambda v: v in (1, 2), "must be 1 or 2"),
    "method.lu_through_classifier": _opt("bool", True),
}

_BARE = {"true": "True", "false": "False", "none": "None"}
_LINE = re.compile(r"^\s*([A-Za-z_][\w]*\.[A-Za-z_][\w]*)\s*=\s*(.*?)\s*$")


def _literal(key: str, text: str):
    text = _BARE.get(text, text)
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        # unquoted words are taken as strings
        if re.fullmatch(r"[\w./\\:-]+", text):
            return text
        raise ConfigError(key, f"cannot parse value {text!r}") from None


def _coerce(key: str, opt: Option, value):
    if value is None:
        if opt.optional:
            return None
        raise ConfigError(key, "may not be none")
    k = opt.kind
    if k == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
    elif k == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    elif k == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(key, "must be finite")
    elif k in ("str", "path"):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
    elif k in ("ints", "floats"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        want = int if k == "ints" else (int, float)
        if any(isinstance(v, bool) or not isinstance(v, want) for v in value):
            raise ConfigError(key, f"expected a list of {k[:-1]}s, got {value!r}")
        value = tuple(int(v) if k == "ints" else float(v) for v in value)
    if opt.choices and value not in opt.choices:
        raise ConfigError(key, f"must be one of {', '.join(opt.choices)}; got {value!r}")
    if opt.check is not None and not opt.check(value):
        raise ConfigError(key, f"{opt.rule}; got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    """Resolved configuration: ``values[section.key]`` for every schema key."""

    values: dict = field(default_factory=lambda: {k: o.default for k, o in SCHEMA.items()})
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def set(self, key: str, value, source: str = "override") -> None:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        self.values[key] = _coerce(key, SCHEMA[key], value)
        if source == "override":
            log.info("override %s = %r", key, self.values[key])

    def set_text(self, key: str, text: str, source: str = "override") -> None:
        self.set(key, _literal(key, text), source)

    def path(self, key: str) -> Path | None:
        p = self.values[key]
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def standardize(self) -> bool:
        s = self.values["dataset.standardize"]
        # digits are already on a common [0, 1] scale
        return self.values["dataset.kind"] != "idx" if s is None else s

    def to_text(self) -> str:
        lines = []
        for k, v in self.values.items():
            if isinstance(v, bool) or v is None:
                text = {True: "true", False: "false", None: "none"}[v]
            elif isinstance(v, tuple):
                text = repr(list(v))
            else:
                text = repr(v)
            lines.append(f"{k} = {text}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig(base_dir=base_dir or Path.cwd())
    seen = set()
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0] if "#" in raw and not _quoted_hash(raw) else raw
        if not line.strip():
            continue
        m = _LINE.match(line)
        if not m:
            raise ConfigError(None, f"line {no}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = m.groups()
        if key in seen:
            raise ConfigError(key, f"line {no}: assigned twice")
        seen.add(key)
        cfg.set_text(key, value, source="file")
    _check_consistency(cfg)
    return cfg


def _quoted_hash(line: str) -> bool:
    # a '#' inside quotes is part of the value
    before = line.split("#", 1)[0]
    return before.count('"') % 2 == 1 or before.count("'") % 2 == 1


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(None, f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent)


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply ``key=value`` strings on top of ``cfg`` (later ones win)."""
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(None, f"override {pair!r} is not key=value")
        key, text = (s.strip() for s in pair.split("=", 1))
        cfg.set_text(key, text)
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg: ExperimentConfig) -> None:
    kind = cfg["dataset.kind"]
    if kind == "csv" and cfg["dataset.source_csv"] is None:
        raise ConfigError("dataset.source_csv", "required when dataset.kind = csv")
    if kind == "idx":
        for k in ("dataset.source_images", "dataset.source_labels",
                  "dataset.target_images", "dataset.target_labels"):
            if cfg[k] is None:
                raise ConfigError(k, "required when dataset.kind = idx")
    if kind == "two_moons" and cfg["dataset.dim"] != 2:
        raise ConfigError("dataset.dim", "two_moons is two-dimensional")
    prior = cfg["dataset.class_prior"]
    if prior and abs(sum(prior) - 1.0) > 1e-9:
        raise ConfigError("dataset.class_prior", f"must sum to 1, got {sum(prior)}")
