"""Flat key=value run configuration.

Files hold one `dotted.key = value` pair per line; `#` starts a comment
line; blank lines are skipped. Values never span lines. Every key must
exist in the schema below with a parseable value, and command-line
`--set key=value` overrides go through exactly the same checks, so a
typo fails fast instead of training with a silently ignored knob.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .errors import ConfigError
from .trainer import TrainConfig


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a bool: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in s.split(","))


_PARSERS: dict[str, Callable] = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "ints": _parse_ints,
}


@dataclass
class Field:
    kind: str
    default: object
    check: Callable | None = None
    help: str = ""


def _positive(x):
    return x > 0


def _nonnegative(x):
    return x >= 0


def _fraction(x):
    return 0.0 < x <= 1.0


def _open_unit(x):
    return 0.0 < x < 1.0


SCHEMA: dict[str, Field] = {
    # dataset generation
    "data.n_images": Field("int", 640, _positive),
    "data.size": Field("int", 32, lambda v: v >= 8 and v % 4 == 0),
    "data.seed": Field("int", 0),
    "data.noise_std": Field("float", 0.09, _nonnegative),
    "data.min_frac": Field("float", 0.25, _open_unit),
    "data.max_frac": Field("float", 0.45, _fraction),
    "data.contrast": Field("float", 0.3, lambda v: 0.0 <= v < 1.0),
    # split
    "split.labeled_fraction": Field("float", 0.1, _fraction),
    "split.val_count": Field("int", 128, _positive),
    # model
    "model.num_classes": Field("int", 4, lambda v: v >= 2),
    "model.enc_channels": Field("ints", (16, 32, 64),
                                lambda v: len(v) == 3 and all(c > 0 for c in v)),
    "model.psp_bins": Field("ints", (1, 2, 3),
                            lambda v: len(v) >= 1 and all(b > 0 for b in v)),
    "model.embed_dim": Field("int", 64, _positive),
    # training
    "train.base_lr": Field("float", 0.05, _positive),
    "train.momentum": Field("float", 0.9, lambda v: 0.0 <= v < 1.0),
    "train.weight_decay": Field("float", 1e-4, _nonnegative),
    "train.power": Field("float", 0.9, _positive),
    "train.max_iter": Field("int", 4000, _positive),
    "train.batch_labeled": Field("int", 4, _positive),
    "train.batch_unlabeled": Field("int", 4, _positive),
    "train.unsup_weight_max": Field("float", 0.02, _nonnegative),
    "train.interp_weight_max": Field("float", 1.5, _nonnegative),
    "train.ramp_len": Field("int", 2000, _nonnegative),
    "train.crop": Field("int", 0, _nonnegative),
    "train.flip_prob": Field("float", 0.5, lambda v: 0.0 <= v <= 1.0),
    "train.eval_every": Field("int", 250, _nonnegative),
    "train.seed": Field("int", 0),
    "train.use_nonlocal": Field("bool", True),
    "train.mixed_ce": Field("bool", True),
    # mixing
    "mix.lambda_max": Field("float", 0.9, _open_unit),
    "mix.pairing": Field("str", "similar", lambda v: v in ("similar", "random")),
    "mix.decouple_mode": Field("str", "soft", lambda v: v in ("soft", "hard")),
}


def defaults() -> dict:
    return {k: f.default for k, f in SCHEMA.items()}


def _set(cfg: dict, key: str, raw: str, where: str) -> None:
    field = SCHEMA.get(key)
    if field is None:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        val = _PARSERS[field.kind](raw)
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}")
    if field.check is not None and not field.check(val):
        raise ConfigError(f"{where}: value {val!r} out of range for {key}")
    cfg[key] = val


def load(path: str | None = None, overrides: list[str] = ()) -> dict:
    """Defaults, then the file (if any), then --set overrides, in order."""
    cfg = defaults()
    if path is not None:
        try:
            with open(path, "r") as fh:
                lines = fh.read().splitlines()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        for ln, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            _set(cfg, key.strip(), raw.strip(), f"{path}:{ln}")
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"--set {ov!r}: expected key=value")
        key, _, raw = ov.partition("=")
        _set(cfg, key.strip(), raw.strip(), f"--set {key.strip()}")
    if cfg["data.min_frac"] > cfg["data.max_frac"]:
        raise ConfigError("data.min_frac must be <= data.max_frac")
    return cfg


def dump(cfg: dict) -> str:
    """Render a config back to file syntax, schema order, one key per line."""
    out = []
    for key, field in SCHEMA.items():
        val = cfg[key]
        if field.kind == "ints":
            text = ",".join(str(v) for v in val)
        elif field.kind == "bool":
            text = "true" if val else "false"
        elif field.kind == "float":
            text = repr(float(val))
        else:
            text = str(val)
        out.append(f"{key} = {text}")
    return "\n".join(out) + "\n"


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        base_lr=cfg["train.base_lr"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        power=cfg["train.power"],
        max_iter=cfg["train.max_iter"],
        batch_labeled=cfg["train.batch_labeled"],
        batch_unlabeled=cfg["train.batch_unlabeled"],
        unsup_weight_max=cfg["train.unsup_weight_max"],
        interp_weight_max=cfg["train.interp_weight_max"],
        ramp_len=cfg["train.ramp_len"],
        lambda_max=cfg["mix.lambda_max"],
        pairing=cfg["mix.pairing"],
        decouple_mode=cfg["mix.decouple_mode"],
        use_nonlocal=cfg["train.use_nonlocal"],
        mixed_ce=cfg["train.mixed_ce"],
        crop=cfg["train.crop"],
        flip_prob=cfg["train.flip_prob"],
        eval_every=cfg["train.eval_every"],
        seed=cfg["train.seed"],
    )


def build_model(cfg: dict, seed: int | None = None):
    from .nn import SegModel

    return SegModel(
        num_classes=cfg["model.num_classes"],
        enc_channels=cfg["model.enc_channels"],
        psp_bins=cfg["model.psp_bins"],
        embed_dim=cfg["model.embed_dim"],
        seed=cfg["train.seed"] if seed is None else seed,
    )
