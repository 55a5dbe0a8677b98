"""Run configuration: JSON schema, strict validation, content digest.

User config files are deep-merged over the defaults below, then validated
key by key; unknown keys are errors so hyperparameter typos cannot pass
silently.  The digest (sha256 of the canonical merged JSON) is stamped
into every output artifact.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

from .cotr import SCALE_DIMS, SCORE_MODES, CotrConfig, ExpertShape
from .mmoe import MmoeConfig
from .stack import LmConfig, StackConfig


class ConfigError(Exception):
    """Invalid, unparseable, or unknown configuration content."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "mode": "standard",
    "model": {
        "vocab_size": 64,
        "n_layers": 2,
        "n_heads": 2,
        "d_llm": 32,
        "mlp_hidden": 128,
        "max_text_positions": 24,
    },
    "cotr": {
        "n_query": 8,
        "d_score": 32,
        "projector_hidden": 64,
        "scale_dim": "score",
        "use_self": True,
        "use_cross": True,
        "use_text": True,
    },
    "vision_experts": [
        {"n_tokens": 36, "dim": 16},
        {"n_tokens": 36, "dim": 24},
    ],
    "mmoe": {
        "n_experts": 3,
        "top_k": 1,
        "rank": 16,
        "balance_weight": 0.05,
        "router_hidden": 32,
    },
    "training": {
        "stage1": {"steps": 200, "lr": 0.3, "batch_size": 8},
        "stage2": {"steps": 800, "lr": 0.3, "batch_size": 8},
        "stage3": {"steps": 600, "lr": 0.2, "batch_size": 8},
    },
    "data": {"n_samples": 2048, "holdout": 256, "seed": 100},
    "efficiency": {
        "baseline_visual_tokens": 2880,
        "reduced_visual_tokens": 64,
        "text_tokens": 32,
        "geometry": {
            "n_layers": 32,
            "d_model": 4096,
            "mlp_hidden": 14336,
            "n_heads": 32,
            "vocab_size": 128256,
        },
    },
}

_STAGE_SCHEMA = {"steps": int, "lr": float, "batch_size": int}

_SCHEMA: dict = {
    "seed": int,
    "mode": str,
    "model": {
        "vocab_size": int, "n_layers": int, "n_heads": int, "d_llm": int,
        "mlp_hidden": int, "max_text_positions": int,
    },
    "cotr": {
        "n_query": int, "d_score": int, "projector_hidden": int,
        "scale_dim": str, "use_self": bool, "use_cross": bool, "use_text": bool,
    },
    "vision_experts": [{"n_tokens": int, "dim": int}],
    "mmoe": {
        "n_experts": int, "top_k": int, "rank": int,
        "balance_weight": float, "router_hidden": int,
    },
    "training": {"stage1": _STAGE_SCHEMA, "stage2": _STAGE_SCHEMA,
                 "stage3": _STAGE_SCHEMA},
    "data": {"n_samples": int, "holdout": int, "seed": int},
    "efficiency": {
        "baseline_visual_tokens": int, "reduced_visual_tokens": int,
        "text_tokens": int,
        "geometry": {"n_layers": int, "d_model": int, "mlp_hidden": int,
                     "n_heads": int, "vocab_size": int},
    },
}


def _validate(obj, schema, path: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: expected an object")
        unknown = sorted(set(obj) - set(schema))
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {unknown}")
        for key, sub in schema.items():
            if key not in obj:
                raise ConfigError(f"{path}: missing key {key!r}")
            _validate(obj[key], sub, f"{path}.{key}")
    elif isinstance(schema, list):
        if not isinstance(obj, list) or not obj:
            raise ConfigError(f"{path}: expected a non-empty array")
        for i, item in enumerate(obj):
            _validate(item, schema[0], f"{path}[{i}]")
    elif schema is float:
        if isinstance(obj, bool) or not isinstance(obj, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {type(obj).__name__}")
    elif schema is int:
        if isinstance(obj, bool) or not isinstance(obj, int):
            raise ConfigError(f"{path}: expected an integer, got {type(obj).__name__}")
    elif schema is bool:
        if not isinstance(obj, bool):
            raise ConfigError(f"{path}: expected a boolean, got {type(obj).__name__}")
    elif schema is str:
        if not isinstance(obj, str):
            raise ConfigError(f"{path}: expected a string, got {type(obj).__name__}")
    else:  # pragma: no cover
        raise AssertionError(f"bad schema node at {path}")


def _merge(base, override, path: str):
    if isinstance(base, dict):
        if not isinstance(override, dict):
            raise ConfigError(f"{path}: expected an object")
        unknown = sorted(set(override) - set(base))
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {unknown}")
        merged = {}
        for key, value in base.items():
            if key in override:
                merged[key] = _merge(value, override[key], f"{path}.{key}")
            else:
                merged[key] = copy.deepcopy(value)
        return merged
    # Arrays and scalars replace wholesale.
    return copy.deepcopy(override)


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully-merged configuration with a content digest."""

    raw: dict
    digest: str

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    def cotr_config(self) -> CotrConfig:
        c = self.raw["cotr"]
        try:
            return CotrConfig(
                experts=tuple(ExpertShape(e["n_tokens"], e["dim"])
                              for e in self.raw["vision_experts"]),
                n_query=c["n_query"], d_score=c["d_score"],
                d_text=self.raw["model"]["d_llm"], d_llm=self.raw["model"]["d_llm"],
                projector_hidden=c["projector_hidden"], mode=self.raw["mode"],
                scale_dim=c["scale_dim"], use_self=c["use_self"],
                use_cross=c["use_cross"], use_text=c["use_text"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def mmoe_config(self) -> MmoeConfig:
        m = self.raw["mmoe"]
        try:
            return MmoeConfig(n_experts=m["n_experts"], top_k=m["top_k"],
                              rank=m["rank"], balance_weight=m["balance_weight"],
                              router_hidden=m["router_hidden"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def stack_config(self) -> StackConfig:
        mdl = self.raw["model"]
        try:
            return StackConfig(
                lm=LmConfig(vocab_size=mdl["vocab_size"], n_layers=mdl["n_layers"],
                            n_heads=mdl["n_heads"], d_llm=mdl["d_llm"],
                            mlp_hidden=mdl["mlp_hidden"],
                            max_text_positions=mdl["max_text_positions"]),
                cotr=self.cotr_config(),
                mmoe=self.mmoe_config())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def stage_schedule(self, stage: int) -> dict:
        return self.raw["training"][f"stage{stage}"]


def _finalize(merged: dict) -> RunConfig:
    _validate(merged, _SCHEMA, "config")
    if merged["mode"] not in SCORE_MODES:
        raise ConfigError(f"config.mode: must be one of {list(SCORE_MODES)}")
    if merged["cotr"]["scale_dim"] not in SCALE_DIMS:
        raise ConfigError(f"config.cotr.scale_dim: must be one of {list(SCALE_DIMS)}")
    if not 0 <= merged["seed"] < 2**64:
        raise ConfigError("config.seed: must fit in an unsigned 64-bit integer")
    if merged["data"]["holdout"] >= merged["data"]["n_samples"]:
        raise ConfigError("config.data.holdout: must be smaller than n_samples")
    canonical = json.dumps(merged, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    config = RunConfig(raw=merged, digest=digest)
    config.stack_config()  # surface geometry errors now, not mid-run
    return config


def load_config(path=None, seed: int | None = None, mode: str | None = None) -> RunConfig:
    """Load and validate a config file (or the defaults), with CLI overrides."""
    if path is None:
        user: dict = {}
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    merged = _merge(DEFAULT_CONFIG, user, "config")
    if seed is not None:
        merged["seed"] = seed
    if mode is not None:
        merged["mode"] = mode
    return _finalize(merged)
