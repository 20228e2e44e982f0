"""Strict INI-style run configuration.

Files hold ``[section]`` headers, ``key = value`` lines and ``#`` comments.
A ``seed`` line may appear before the first section. Unknown sections or keys
are errors, so a typo can never fall back silently to a default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .attribution import METHODS, READOUTS, MacConfig
from .degrade import KINDS, OOD_KINDS
from .errors import BadValue, ConfigSyntaxError, UnknownKey
from .evalkit import MODES
from .model import ModelConfig
from .trainer import ABLATIONS, PipelineConfig, TrainConfig

ALL_KINDS = KINDS + OOD_KINDS


def _int(lo=None, hi=None):
    def conv(text):
        v = int(text)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"must be in [{lo}, {hi}]")
        return v
    return conv


def _float(lo=None, hi=None, lo_open=False, hi_open=False):
    def conv(text):
        v = float(text)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"below lower bound {lo}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ValueError(f"above upper bound {hi}")
        return v
    return conv


def _bool(text):
    t = text.lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected true/false")


def _choice(options):
    def conv(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return conv


def _list(item, options=None, allow_empty=False):
    def conv(text):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts and not allow_empty:
            raise ValueError("list is empty")
        out = tuple(item(p) for p in parts)
        if options is not None:
            bad = [p for p in out if p not in options]
            if bad:
                raise ValueError(f"unknown entries {bad}")
        return out
    return conv


_LR = _float(0.0, lo_open=True)
_KIND_LIST = _list(str, ALL_KINDS)

# section -> key -> (converter, default)
SCHEMA = {
    "": {"seed": (_int(0), 0)},
    "data": {
        "image_size": (_int(16), 32),
        "kinds": (_KIND_LIST, ("noise", "kernel_blur", "jpeg")),
        "weights": (_list(_float(0.0), allow_empty=True), ()),
        "train_images": (_int(1), 64),
        "val_images": (_int(1), 8),
    },
    "model": {
        "width": (_int(4), 32),
        "blocks": (_int(1), 8),
    },
    "pretrain": {
        "steps": (_int(1), 2000),
        "batch_size": (_int(1), 4),
        "lr_max": (_LR, 1e-4),
        "lr_min": (_LR, 6e-5),
        "ratio": (_float(0.0, 1.0, lo_open=True, hi_open=True), 0.5),
        "patch": (_int(1), 1),
        "eval_every": (_int(1), 100),
    },
    "mac": {
        "delta": (_float(0.0, lo_open=True), 10000.0),
        "ratio": (_float(0.0, 1.0, lo_open=True), 0.5),
        "steps": (_int(2), 200),
        "samples": (_int(1), 10),
        "readout": (_choice(READOUTS), "mean"),
        "signed": (_bool, False),
        "chunk": (_int(1), 16),
        "k_percent": (_float(0.0, 100.0, lo_open=True), 10.0),
        "method": (_choice(METHODS), "mac"),
    },
    "finetune": {
        "steps": (_int(0), 400),
        "batch_size": (_int(1), 4),
        "lr_max": (_LR, 2e-4),
        "lr_min": (_LR, 1e-7),
        "eval_every": (_int(1), 100),
    },
    "eval": {
        "kinds": (_KIND_LIST, ("noise", "kernel_blur", "jpeg")),
        "images": (_int(1), 8),
        "mode": (_choice(MODES), "whole"),
        "ood_kind": (_choice(ALL_KINDS), "saltpepper"),
    },
    "ablate": {
        "kind": (_choice(ABLATIONS), "selection_strategy"),
        "grid": (_list(str), ("mac", "ig", "random")),
        "seeds": (_list(_int(0)), (0,)),
    },
}

SECTIONS = tuple(s for s in SCHEMA if s)


def _defaults():
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=_defaults)

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values[""]["seed"]

    def with_seed(self, seed):
        vals = {s: dict(v) for s, v in self.values.items()}
        vals[""]["seed"] = int(seed)
        return RunConfig(vals)

    def with_values(self, section, **kw):
        vals = {s: dict(v) for s, v in self.values.items()}
        for k, v in kw.items():
            if k not in SCHEMA[section]:
                raise UnknownKey(f"{section}.{k}")
            vals[section][k] = v
        return RunConfig(vals)

    # module configs

    def model_config(self):
        m = self["model"]
        return ModelConfig(width=m["width"], blocks=m["blocks"])

    def pretrain_config(self):
        d, p = self["data"], self["pretrain"]
        return TrainConfig(
            stage="pretrain", steps=p["steps"], batch_size=p["batch_size"],
            lr_max=p["lr_max"], lr_min=p["lr_min"], mask_ratio=p["ratio"],
            mask_patch=p["patch"], seed=self.seed, kinds=d["kinds"],
            weights=d["weights"], image_size=d["image_size"],
            eval_every=p["eval_every"], val_images=d["val_images"],
        )

    def finetune_config(self):
        d, f = self["data"], self["finetune"]
        return TrainConfig(
            stage="finetune", steps=f["steps"], batch_size=f["batch_size"],
            lr_max=f["lr_max"], lr_min=f["lr_min"], mask_ratio=0.0,
            seed=self.seed, kinds=d["kinds"], weights=d["weights"],
            image_size=d["image_size"], eval_every=f["eval_every"],
            val_images=d["val_images"],
        )

    def mac_config(self):
        m = self["mac"]
        return MacConfig(
            delta=m["delta"], ratio=m["ratio"], steps=m["steps"], samples=m["samples"],
            readout=m["readout"], signed=m["signed"], chunk=m["chunk"], seed=self.seed,
        )

    def pipeline(self):
        return PipelineConfig(
            model=self.model_config(), pretrain=self.pretrain_config(),
            mac=self.mac_config(), finetune=self.finetune_config(),
            k_percent=self["mac"]["k_percent"], eval_kinds=self["eval"]["kinds"],
            eval_images=self["eval"]["images"], mac_kinds=self["data"]["kinds"],
            ood_kind=self["eval"]["ood_kind"], seeds=self["ablate"]["seeds"],
        )

    def validate(self):
        """Cross-key checks that a single value cannot express."""
        for sec in ("pretrain", "finetune"):
            if self[sec]["lr_min"] > self[sec]["lr_max"]:
                raise BadValue(f"{sec}.lr_min: must not exceed lr_max")
        d = self["data"]
        if d["weights"] and len(d["weights"]) != len(d["kinds"]):
            raise BadValue("data.weights: need one weight per kind")
        if d["weights"] and sum(d["weights"]) <= 0:
            raise BadValue("data.weights: sum must be positive")
        if d["image_size"] % self["pretrain"]["patch"]:
            raise BadValue("pretrain.patch: must divide data.image_size")
        return self

    def echo(self):
        lines = [f"seed = {self.seed}"]
        for sec in SECTIONS:
            lines.append("")
            lines.append(f"[{sec}]")
            for key in SCHEMA[sec]:
                lines.append(f"{key} = {_format(self.values[sec][key])}")
        return "\n".join(lines) + "\n"


def parse_config(text):
    values = _defaults()
    section = ""
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigSyntaxError(lineno, f"malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise UnknownKey(f"[{section}]")
            continue
        if "=" not in line:
            raise ConfigSyntaxError(lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigSyntaxError(lineno, "empty key")
        name = f"{section}.{key}" if section else key
        if key not in SCHEMA[section]:
            raise UnknownKey(name)
        if (section, key) in seen:
            raise ConfigSyntaxError(lineno, f"duplicate key {name}")
        seen.add((section, key))
        conv, _ = SCHEMA[section][key]
        try:
            values[section][key] = conv(value)
        except ValueError as exc:
            raise BadValue(f"{name}: {exc}") from None
    return RunConfig(values).validate()


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
