"""Flat ``key = value`` configuration files.

Lines are ``key = value`` pairs, ``#`` comments or blank.  Keys are
namespaced (``data.kind``, ``hp.lambda``, ``train.stage_a_steps``...).
Unknown keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import hashlib
from dataclasses import replace
from pathlib import Path

from .data import DatasetSpec
from .model import Hyperparams
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line
        self.key = key


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_str(text: str):
    return None if text in ("", "none") else text


# key -> (section, field, parser); section is "data", "hp" or "" for TrainConfig
KEYS: dict[str, tuple[str, str, callable]] = {
    "seed": ("", "seed", int),
    "data.kind": ("data", "kind", str),
    "data.n": ("data", "n", int),
    "data.noise": ("data", "noise", float),
    "data.seed": ("data", "seed", int),
    "data.normalize": ("data", "normalize", _bool),
    "data.path": ("data", "path", _opt_str),
    "data.heldout_n": ("", "heldout_n", int),
    "model.dz": ("hp", "dz", int),
    "model.width": ("", "width", int),
    "model.depth": ("", "depth", int),
    "model.bn": ("hp", "use_bn", _bool),
    "model.decoder_activation": ("", "decoder_activation", str),
    "hp.lambda": ("hp", "lam", float),
    "hp.gamma": ("hp", "gamma", float),
    "hp.omega1": ("hp", "omega1", float),
    "hp.omega2": ("hp", "omega2", float),
    "hp.mu_max": ("hp", "mu_max", float),
    "hp.bn_eps": ("hp", "bn_eps", float),
    "hp.bn_momentum": ("hp", "bn_momentum", float),
    "train.batch_size": ("hp", "batch_size", int),
    "train.stage_a_steps": ("", "stage_a_steps", int),
    "train.stage_b_steps": ("", "stage_b_steps", int),
    "train.critic_ratio": ("", "critic_ratio", int),
    "train.disc_ratio": ("", "disc_ratio", int),
    "train.g_average": ("", "g_average", float),
    "train.critic": ("", "train_critic", _bool),
    "train.grad_clip": ("", "grad_clip", float),
    "train.eval_interval": ("", "eval_interval", int),
    "train.checkpoint": ("", "checkpoint_path", _opt_str),
    "optim.lr": ("", "ae_lr", float),
    "optim.beta1": ("", "ae_beta1", float),
    "optim.beta2": ("", "beta2", float),
    "optim.adv_lr": ("", "adv_lr", float),
    "optim.adv_beta1": ("", "adv_beta1", float),
    "eval.k": ("", "eval_k", int),
    "eval.n": ("", "eval_n", int),
    "eval.n_proj": ("", "n_proj", int),
}


def parse_line(line: str, lineno: int | None = None) -> tuple[str, str] | None:
    """``(key, value)`` for an assignment, ``None`` for blanks and comments."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ConfigError(f"expected 'key = value', got {line.strip()!r}", lineno)
    key, value = (part.strip() for part in text.split("=", 1))
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}", lineno, key)
    return key, value


def parse_config_text(text: str) -> dict[str, tuple[str, int]]:
    """Map each key to ``(raw value, line number)``; later lines win."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        parsed = parse_line(line, lineno)
        if parsed is not None:
            entries[parsed[0]] = (parsed[1], lineno)
    return entries


def parse_overrides(pairs) -> dict[str, tuple[str, None]]:
    entries = {}
    for pair in pairs:
        parsed = parse_line(pair)
        if parsed is None:
            raise ConfigError(f"empty override {pair!r}")
        entries[parsed[0]] = (parsed[1], None)
    return entries


def build_config(entries: dict[str, tuple[str, int | None]]) -> TrainConfig:
    sections: dict[str, dict] = {"": {}, "data": {}, "hp": {}}
    for key, (raw, lineno) in entries.items():
        section, name, parser = KEYS[key]
        try:
            sections[section][name] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno, key) from None
    top = sections[""]
    seed = top.get("seed", 0)
    sections["data"].setdefault("seed", seed)
    try:
        data = DatasetSpec(**sections["data"])
        hp = Hyperparams(**sections["hp"])
        return TrainConfig(data=data, hp=hp, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides=(), seed: int | None = None) -> tuple[TrainConfig, dict[str, str]]:
    """Read a config file, apply ``key=value`` overrides, then ``seed``.

    Returns the config and the resolved raw key/value table.
    """
    entries = {}
    if path is not None:
        entries.update(parse_config_text(Path(path).read_text()))
    entries.update(parse_overrides(overrides))
    if seed is not None:
        entries["seed"] = (str(seed), None)
    config = build_config(entries)
    return config, {k: v for k, (v, _) in entries.items()}


def to_entries(config: TrainConfig) -> dict[str, str]:
    """Every key with its effective value, as text."""
    out = {}
    for key, (section, name, _) in KEYS.items():
        obj = {"": config, "data": config.data, "hp": config.hp}[section]
        value = getattr(obj, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        out[key] = "none" if value is None else str(value)
    return out


def render_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(to_entries(config).items()))


def config_from_entries(entries: dict[str, str]) -> TrainConfig:
    return build_config({k: (v, None) for k, v in entries.items() if k in KEYS})


def config_digest(config: TrainConfig) -> str:
    """Content address of the effective configuration (checkpoint path excluded)."""
    text = render_config(replace(config, checkpoint_path=None))
    return hashlib.sha256(text.encode()).hexdigest()[:12]
