"""Quantization schemes: one global assignment plus ordered per-layer overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

from .quant import PER_CHANNEL, PER_TENSOR, Granularity, RangeMethod

SCHEME_VERSION = 1
ACTIONS = ("per_channel_weights", "percentile_acts", "l2min_acts", "skip", "asymmetric_weights", "dynamic_acts")


@dataclass(frozen=True)
class GlobalScheme:
    act_range: RangeMethod = RangeMethod.minmax()
    weight_range: RangeMethod = RangeMethod.minmax()
    weight_granularity: Granularity = PER_TENSOR
    skip_last_fc: bool = False
    fallback_precision: str = "fp16"
    act_mode: str = "static"

    def __post_init__(self):
        if self.fallback_precision not in ("fp16", "fp32"):
            raise ValueError(f"fallback precision must be fp16 or fp32, got {self.fallback_precision!r}")
        if self.act_mode not in ("static", "dynamic"):
            raise ValueError(f"activation mode must be static or dynamic, got {self.act_mode!r}")

    @property
    def tuned_methods(self) -> int:
        """How many range choices depart from plain min-max (used for tie-breaking)."""
        return (self.act_range.kind != "minmax") + (self.weight_range.kind != "minmax")

    def label(self) -> str:
        return (
            f"act={self.act_range.label} w={self.weight_range.label} "
            f"{self.weight_granularity.kind} skip_last={self.skip_last_fc}"
        )

    def to_dict(self) -> dict:
        return {
            "act_range": self.act_range.to_dict(),
            "weight_range": self.weight_range.to_dict(),
            "weight_granularity": self.weight_granularity.kind,
            "skip_last_fc": self.skip_last_fc,
            "fallback_precision": self.fallback_precision,
            "act_mode": self.act_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalScheme":
        return cls(
            act_range=RangeMethod.from_dict(d.get("act_range", {"kind": "minmax"})),
            weight_range=RangeMethod.from_dict(d.get("weight_range", {"kind": "minmax"})),
            weight_granularity=Granularity(d.get("weight_granularity", "per_tensor")),
            skip_last_fc=bool(d.get("skip_last_fc", False)),
            fallback_precision=d.get("fallback_precision", "fp16"),
            act_mode=d.get("act_mode", "static"),
        )


@dataclass(frozen=True)
class LayerOverride:
    node: str
    action: str
    q: float | None = None

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown override action {self.action!r}")

    def to_dict(self) -> dict:
        d = {"node": self.node, "action": self.action}
        if self.q is not None:
            d["q"] = self.q
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerOverride":
        return cls(d["node"], d["action"], d.get("q"))


@dataclass(frozen=True)
class LayerConfig:
    act_in: RangeMethod
    act_out: RangeMethod
    weight_range: RangeMethod
    granularity: Granularity
    symmetric: bool
    dynamic: bool
    skip: bool


@dataclass(frozen=True)
class QuantScheme:
    global_: GlobalScheme = field(default_factory=GlobalScheme)
    overrides: tuple[LayerOverride, ...] = ()

    def with_override(self, ov: LayerOverride) -> "QuantScheme":
        return replace(self, overrides=self.overrides + (ov,))

    def layer_config(self, node: str) -> LayerConfig:
        g = self.global_
        cfg = dict(
            act_in=g.act_range,
            act_out=g.act_range,
            weight_range=g.weight_range,
            granularity=g.weight_granularity,
            symmetric=True,
            dynamic=g.act_mode == "dynamic",
            skip=False,
        )
        for ov in self.overrides:
            if ov.node != node:
                continue
            if ov.action == "per_channel_weights":
                cfg["granularity"] = PER_CHANNEL
            elif ov.action == "percentile_acts":
                p = RangeMethod.percentile(ov.q if ov.q is not None else 0.99)
                cfg["act_in"] = cfg["act_out"] = p
            elif ov.action == "l2min_acts":
                cfg["act_in"] = cfg["act_out"] = RangeMethod.l2min()
            elif ov.action == "asymmetric_weights":
                cfg["symmetric"] = False
            elif ov.action == "dynamic_acts":
                cfg["dynamic"] = True
            elif ov.action == "skip":
                cfg["skip"] = True
        return LayerConfig(**cfg)

    def skipped(self, node: str) -> bool:
        return any(ov.node == node and ov.action == "skip" for ov in self.overrides)

    def check_nodes(self, fc_names) -> None:
        names = set(fc_names)
        seen_skip = set()
        for ov in self.overrides:
            if ov.node not in names:
                raise ValueError(f"override names unknown FC node {ov.node!r}")
            if ov.action == "skip":
                if ov.node in seen_skip:
                    raise ValueError(f"duplicate skip for {ov.node!r}")
                seen_skip.add(ov.node)

    def to_dict(self) -> dict:
        return {
            "version": SCHEME_VERSION,
            "global": self.global_.to_dict(),
            "overrides": [o.to_dict() for o in self.overrides],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        if d.get("version", SCHEME_VERSION) != SCHEME_VERSION:
            raise ValueError(f"unsupported scheme version {d.get('version')}")
        return cls(GlobalScheme.from_dict(d.get("global", {})), tuple(LayerOverride.from_dict(o) for o in d.get("overrides", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path) -> "QuantScheme":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def skip_all(fc_names) -> QuantScheme:
    return QuantScheme(GlobalScheme(), tuple(LayerOverride(n, "skip") for n in fc_names))
