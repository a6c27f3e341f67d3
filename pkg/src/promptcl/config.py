"""Experiment configuration files.

Line-oriented text, UTF-8::

    # comment
    [train]
    epochs = 5
    lr_prompt = 0.01

    [sweep]
    grid = 48, 96, 192

Every key has a declared type and default; unknown sections or keys,
duplicate keys and malformed values raise :class:`ConfigError` carrying the
offending line number. Strings may be bare or double-quoted.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "backbone": {
        "image_size": ("int", 16), "channels": ("int", 1), "patch_size": ("int", 4), "embed_dim": ("int", 32),
        "depth": ("int", 2), "heads": ("int", 2), "mlp_ratio": ("float", 4.0), "insert_layer": ("int", 0),
        "ln_eps": ("float", 1e-6),
        "pretrain_classes": ("int", 20), "pretrain_train": ("int", 30), "pretrain_test": ("int", 10),
        "pretrain_epochs": ("int", 15), "pretrain_batch": ("int", 32), "pretrain_lr": ("float", 2e-3),
        "pretrain_data_seed": ("int", 100), "pretrain_seed": ("int", 0),
    },
    "stream": {
        "n_classes": ("int", 20), "n_tasks": ("int", 5), "n_train": ("int", 24), "n_test": ("int", 10),
        "data_seed": ("int", 1), "stream_seed": ("int", 0), "fine_grained": ("bool", False),
        "jitter": ("float", 1.0), "noise": ("float", 0.1),
    },
    "method": {
        "strategy": ("str", "only_prompt"), "n_params": ("int", 768), "pool_size": ("int", 10),
        "prompt_length": ("int", 1), "top_n": ("int", 3), "query": ("str", "default"), "head": ("str", "linear"),
        "adapt": ("str", "all"), "tap": ("bool", False),
    },
    "train": {
        "epochs": ("int", 5), "batch_size": ("int", 16), "lr_head": ("float", 1e-3), "lr_prompt": ("float", 1e-2),
        "beta1": ("float", 0.9), "beta2": ("float", 0.999), "eps": ("float", 1e-8), "surrogate": ("float", 0.5),
        "train_seed": ("int", 0), "tap_samples": ("int", 64), "tap_epochs": ("int", 10),
        "oracle_epochs": ("int", 10), "oracle_lr": ("float", 1e-3),
    },
    "reg": {
        "kind": ("str", "none"), "strength": ("float", 0.0), "damping": ("float", 0.1),
        "select": ("bool", False), "candidates": ("floats", [0.1, 1.0, 10.0, 100.0]),
    },
    "sweep": {
        "grid": ("ints", [48, 96, 192, 384, 768, 1536, 3072, 6144, 12288]), "seeds": ("ints", [0, 1, 2]),
    },
}


def _parse_value(kind: str, raw: str, line: int, key: str):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] == '"':
        raw = raw[1:-1]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return [int(x) for x in raw.strip("[]").split(",") if x.strip()]
        if kind == "floats":
            return [float(x) for x in raw.strip("[]").split(",") if x.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"bad {kind} value {raw!r} for {key!r}", line) from None


@dataclass
class Config:
    values: dict[str, dict] = field(default_factory=lambda: {s: {k: copy.deepcopy(d) for k, (_, d) in keys.items()}
                                                             for s, keys in SCHEMA.items()})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def resolved(self) -> dict:
        """Every key with defaults materialized."""
        return copy.deepcopy(self.values)

    # -- typed views --

    def vit(self):
        from .backbone import ViTConfig

        b = self["backbone"]
        return ViTConfig(b["image_size"], b["channels"], b["patch_size"], b["embed_dim"], b["depth"], b["heads"],
                         b["mlp_ratio"], b["insert_layer"], b["ln_eps"])

    def grating(self):
        from .data import GratingSpec

        s, b = self["stream"], self["backbone"]
        return GratingSpec(b["image_size"], b["channels"], s["jitter"], s["noise"], s["fine_grained"])

    def method(self):
        from .engine import MethodConfig

        return MethodConfig(**self["method"])

    def train(self):
        from .engine import TrainConfig

        t, r = dict(self["train"]), self["reg"]
        seed = t.pop("train_seed")
        return TrainConfig(**t, seed=seed, reg_kind=r["kind"], reg_strength=r["strength"], si_damping=r["damping"])

    def finetune(self):
        from .finetune import FinetuneConfig

        b = self["backbone"]
        return FinetuneConfig(b["pretrain_epochs"], b["pretrain_batch"], b["pretrain_lr"], b["pretrain_seed"])


def parse_config(text: str) -> Config:
    cfg = Config()
    section = None
    seen: set[tuple[str, str]] = set()
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", n)
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", n)
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", n)
        if section is None:
            raise ConfigError("key outside of any section", n)
        key, raw = (x.strip() for x in stripped.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", n)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", n)
        seen.add((section, key))
        cfg.values[section][key] = _parse_value(SCHEMA[section][key][0], raw, n, key)
    return cfg


def load_config(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"{path} is not valid UTF-8") from None
    return parse_config(text)


def render_config(cfg: Config) -> str:
    """Inverse of :func:`parse_config` with every key written out."""
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (kind, _) in keys.items():
            v = cfg.values[section][key]
            if kind in ("ints", "floats"):
                text = ", ".join(repr(x) for x in v)
            elif kind == "bool":
                text = "true" if v else "false"
            else:
                text = repr(v) if kind == "float" else str(v)
            out.append(f"{key} = {text}")
        out.append("")
    return "\n".join(out)
