"""Flat key=value run configuration.

Dotted keys, one per line, ``#`` comments; unknown keys are hard errors so
a typo cannot silently fall back to a default.  The canonical
serialization (schema order, repr-stable values) feeds the config hash
recorded in checkpoints.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import SpecError
from .heads import HEAD_VARIANTS

# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "model.stages": (int, 5),
    "model.base_channels": (int, 16),
    "model.max_channels": (int, 256),
    "model.in_channels": (int, 1),
    "model.embed_dim": (int, 64),
    "model.attn_heads": (int, 4),
    "head.variant": (str, "decoupled"),
    "head.num_queries": (int, 0),  # 0: one query per matchable class
    "head.shared_queries": (bool, True),
    "head.masked_attention": (bool, True),
    "fsad.enabled": (bool, True),
    "fsad.query_levels": (int, 4),
    "fsad.points_k": (int, 4),
    "fsad.heads": (int, 4),
    "loss.lambda_class": (float, 2.0),
    "loss.lambda_bce": (float, 10.0),
    "loss.lambda_dice": (float, 10.0),
    "loss.no_object_weight": (float, 0.1),
    "loss.stages": (int, 3),
    "optim.init_lr": (float, 1e-3),
    "optim.lambda_cnn": (float, 1.0),
    "optim.lambda_trans": (float, 0.1),
    "optim.max_epoch": (int, 100),
    "optim.momentum": (float, 0.99),
    "optim.weight_decay": (float, 3e-5),
    "optim.nesterov": (bool, False),
    "data.volume": (int, 32),
    "data.classes": (int, 4),
    "data.blobs_min": (int, 1),
    "data.blobs_max": (int, 3),
    "data.radius_min": (float, 3.0),
    "data.radius_max": (float, 7.0),
    "data.noise_sigma": (float, 0.1),
    "data.intensity_step": (float, 1.0),
    "data.num_train": (int, 16),
    "data.num_val": (int, 8),
    "data.seed": (int, 0),
    "data.gen_count": (int, 8),
    "train.seed": (int, 0),
    "train.batch_size": (int, 2),
    "train.iters_per_epoch": (int, 20),
    "train.eval_every": (int, 5),
    "train.save_every": (int, 0),  # 0: final checkpoint only
}


def _parse_value(key: str, raw: str):
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise SpecError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise SpecError(f"{key}: {exc}") from None


class Config:
    def __init__(self, values: dict | None = None):
        self._values = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise SpecError(f"unknown config key {k!r}")
            self._values[k] = v
        self.validate()

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise SpecError(f"unknown config key {key!r}")
        return self._values[key]

    def with_overrides(self, **dotted) -> "Config":
        vals = dict(self._values)
        for k, v in dotted.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise SpecError(f"unknown config key {key!r}")
            vals[key] = v
        return Config(vals)

    @classmethod
    def from_text(cls, text: str) -> "Config":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpecError(f"line {lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA:
                raise SpecError(f"line {lineno}: unknown config key {key!r}")
            if key in values:
                raise SpecError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse_value(key, raw)
        return cls(values)

    @classmethod
    def from_file(cls, path) -> "Config":
        return cls.from_text(Path(path).read_text())

    def canonical_text(self) -> str:
        lines = []
        for key, (typ, _) in SCHEMA.items():
            v = self._values[key]
            if typ is bool:
                rep = "true" if v else "false"
            elif typ is float:
                rep = repr(float(v))
            else:
                rep = str(v)
            lines.append(f"{key} = {rep}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def validate(self) -> None:
        v = self._values
        if v["head.variant"] not in HEAD_VARIANTS:
            raise SpecError(f"head.variant must be one of {HEAD_VARIANTS}")
        if v["model.stages"] < 4:
            raise SpecError("model.stages must be >= 4")
        div = 2 ** (v["model.stages"] - 1)
        if v["data.volume"] % div or v["data.volume"] < div:
            raise SpecError(f"data.volume must be a positive multiple of {div}")
        if not 1 <= v["fsad.query_levels"] <= v["model.stages"]:
            raise SpecError("fsad.query_levels must lie in 1..model.stages")
        if not 1 <= v["loss.stages"] <= v["model.stages"] - 1:
            raise SpecError("loss.stages must lie in 1..model.stages-1")
        if v["data.classes"] < 1:
            raise SpecError("data.classes must be positive")
        if v["data.blobs_min"] < 0 or v["data.blobs_max"] < v["data.blobs_min"]:
            raise SpecError("blob count range is inverted")
        if v["data.radius_max"] < v["data.radius_min"] or v["data.radius_min"] <= 0:
            raise SpecError("blob radius range is invalid")
        if 2 * v["data.radius_max"] > v["data.volume"]:
            raise SpecError("blob radius exceeds the volume")
        if v["data.noise_sigma"] >= v["data.intensity_step"]:
            raise SpecError("class intensity separation must exceed the noise sigma")
        for key in ("optim.init_lr", "optim.max_epoch", "train.batch_size",
                    "train.iters_per_epoch", "model.embed_dim", "model.attn_heads",
                    "fsad.points_k", "fsad.heads"):
            if v[key] <= 0:
                raise SpecError(f"{key} must be positive")
        if v["model.embed_dim"] % v["model.attn_heads"]:
            raise SpecError("model.embed_dim must divide by model.attn_heads")
        if v["model.embed_dim"] % v["fsad.heads"]:
            raise SpecError("model.embed_dim must divide by fsad.heads")
