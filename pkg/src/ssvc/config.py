"""Plain-text ``key = value`` run configuration.

Every training, synthetic-data, masking and loss-weight field has one key.
Unknown keys are rejected; absent keys keep their defaults.  ``dump_config``
writes every key so that parse -> dump -> parse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .augment import MaskSpec
from .features import SynthConfig
from .losses import LossWeights
from .networks import NetConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "steps_per_epoch": int,
    "lr_g": float,
    "lr_d": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "tau": float,
    "early_stop_patience": int,
    "seed": int,
    "d_steps_per_g_step": int,
    "eval_per_domain": int,
}
_WEIGHT_KEYS = {"lambda1": float, "lambda2": float}
_MASK_KEYS = {"axis": str, "max_width": "width", "n_masks": int, "fill": str}
_NET_KEYS = {
    "channels": "ints",
    "n_res_blocks": int,
    "d_e": int,
    "d_p": int,
    "embed_dim": int,
    "head_activation": str,
    "dtype": str,
}
_SYNTH_KEYS = {
    "n_domains": int,
    "n_mcep": int,
    "n_frames": int,
    "train_per_domain": int,
    "eval_per_domain": int,
    "seed": int,
    "prototype_smoothness": float,
    "noise_scale": float,
    "gain_spread": float,
}


def known_keys() -> list[str]:
    keys = list(_TRAIN_KEYS) + list(_WEIGHT_KEYS)
    keys += [f"{m}.{k}" for m in ("t1", "t2") for k in _MASK_KEYS]
    keys += [f"net.{k}" for k in _NET_KEYS]
    keys += [f"synth.{k}" for k in _SYNTH_KEYS]
    return keys


def _convert(key: str, kind, raw: str):
    try:
        if kind == "width":
            return None if raw == "auto" else int(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(","))
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r}") from exc


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    train, synth = base.train, base.synth
    top, weights, net = {}, {}, {}
    masks: dict[str, dict] = {"t1": {}, "t2": {}}
    synth_kw = {}
    for key, raw in pairs.items():
        if key in _TRAIN_KEYS:
            top[key] = _convert(key, _TRAIN_KEYS[key], raw)
        elif key in _WEIGHT_KEYS:
            weights[key] = _convert(key, float, raw)
        elif key.count(".") == 1:
            group, name = key.split(".")
            if group in masks and name in _MASK_KEYS:
                masks[group][name] = _convert(key, _MASK_KEYS[name], raw)
            elif group == "net" and name in _NET_KEYS:
                net[name] = _convert(key, _NET_KEYS[name], raw)
            elif group == "synth" and name in _SYNTH_KEYS:
                synth_kw[name] = _convert(key, _SYNTH_KEYS[name], raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "early_stop_patience" not in top and "epochs" in top:
        # an absent patience defaults to min(default, epochs) so short runs stay valid
        top["early_stop_patience"] = min(train.early_stop_patience, top["epochs"])
    try:
        train = replace(
            train,
            **top,
            weights=replace(train.weights, **weights),
            t1=replace(train.t1, **masks["t1"]),
            t2=replace(train.t2, **masks["t2"]),
            net=replace(train.net, **net),
        ).validate()
        synth = replace(synth, **synth_kw).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train, synth)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return parse_pairs(pairs, base)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    t = cfg.train
    lines = [f"{k} = {_fmt(getattr(t, k))}" for k in _TRAIN_KEYS]
    lines += [f"{k} = {_fmt(getattr(t.weights, k))}" for k in _WEIGHT_KEYS]
    for m in ("t1", "t2"):
        spec: MaskSpec = getattr(t, m)
        lines += [f"{m}.{k} = {_fmt(getattr(spec, k))}" for k in _MASK_KEYS]
    net: NetConfig = t.net
    lines += [f"net.{k} = {_fmt(getattr(net, k))}" for k in _NET_KEYS]
    lines += [f"synth.{k} = {_fmt(getattr(cfg.synth, k))}" for k in _SYNTH_KEYS]
    return "\n".join(lines) + "\n"


def with_weights(cfg: RunConfig, lambda1: float | None, lambda2: float | None) -> RunConfig:
    """Command-line weight overrides take precedence over the file."""
    w = cfg.train.weights
    w = LossWeights(w.lambda1 if lambda1 is None else lambda1, w.lambda2 if lambda2 is None else lambda2)
    return RunConfig(replace(cfg.train, weights=w), cfg.synth)
