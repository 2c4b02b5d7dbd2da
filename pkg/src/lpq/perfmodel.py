"""Roofline latency model for FC, SLS and BatchMatMul operators."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph.ir import BMM, FC_KINDS, SLS, ModelGraph

FP32_BYTES = 4
WEIGHT_BYTES = {"fp32": 4, "fp16": 2, "int8": 1}


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_flops: float  # F, flops/s
    efficiency: float  # E in (0, 1]
    mem_bandwidth: float  # B, bytes/s

    def __post_init__(self):
        if not (self.peak_flops > 0 and self.mem_bandwidth > 0):
            raise ValueError("peak_flops and mem_bandwidth must be positive")
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must lie in (0, 1]")

    @property
    def sustained_flops(self) -> float:
        return self.peak_flops * self.efficiency

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareSpec":
        return cls(str(d.get("name", "custom")), float(d["peak_flops"]), float(d["efficiency"]), float(d["mem_bandwidth"]))


PRESETS = {"broadwell-like": HardwareSpec("broadwell-like", 1e12, 0.9, 70e9)}


def load_hardware(spec) -> HardwareSpec:
    """Preset name, path to a JSON document, or a dict."""
    if isinstance(spec, HardwareSpec):
        return spec
    if isinstance(spec, dict):
        return HardwareSpec.from_dict(spec)
    if spec in PRESETS:
        return PRESETS[spec]
    p = Path(spec)
    if not p.exists():
        raise ValueError(f"unknown hardware spec {spec!r}")
    return HardwareSpec.from_dict(json.loads(p.read_text()))


@dataclass(frozen=True)
class FCShape:
    m: int
    n: int
    k: int
    weight_bytes_per_element: int = FP32_BYTES

    def __post_init__(self):
        if min(self.m, self.n, self.k) <= 0:
            raise ValueError("FC dimensions must be positive")
        if self.weight_bytes_per_element not in (1, 2, 4):
            raise ValueError("weight bytes per element must be 1, 2 or 4")


@dataclass(frozen=True)
class Latency:
    t_comp: float
    t_mem: float
    t: float
    bound: str  # "memory" or "compute"
    flops: float
    bytes: float


def _latency(flops: float, nbytes: float, hw: HardwareSpec) -> Latency:
    t_comp = flops / hw.sustained_flops
    t_mem = nbytes / hw.mem_bandwidth
    return Latency(t_comp, t_mem, max(t_comp, t_mem), "memory" if t_comp < t_mem else "compute", flops, nbytes)


def fc_latency(shape: FCShape, hw: HardwareSpec) -> Latency:
    """m x n input times n x k weights. Only weight traffic counts toward memory time."""
    return _latency(2.0 * shape.m * shape.n * shape.k, float(shape.weight_bytes_per_element) * shape.k * shape.n, hw)


def batch_threshold(hw: HardwareSpec, bytes_per_element: int = FP32_BYTES) -> float:
    """Batch size below which an FC is memory bound: bytes * F * E / (2 * B)."""
    return bytes_per_element * hw.sustained_flops / (2.0 * hw.mem_bandwidth)


# -- graph report ------------------------------------------------------------


def _fc_weight_bytes(n) -> int:
    return WEIGHT_BYTES.get(n.precision, FP32_BYTES)


def _row_bytes(g: ModelGraph, table: str) -> float:
    t = g.tables[table]
    return t.storage_bytes / t.rows


def node_latency(n, g: ModelGraph, m: int, hw: HardwareSpec, pooling: float) -> Latency | None:
    if n.kind in FC_KINDS:
        return fc_latency(FCShape(m, n.attrs["in_dim"], n.attrs["out_dim"], _fc_weight_bytes(n)), hw)
    if n.kind == SLS:
        return _latency(0.0, m * pooling * _row_bytes(g, n.attrs["table"]), hw)
    if n.kind == BMM:
        f, d = len(n.inputs), n.attrs.get("dim", 0)
        return _latency(2.0 * m * f * d * f, float(FP32_BYTES) * m * f * d, hw)
    return None


def graph_report(g: ModelGraph, hw: HardwareSpec, batch_dist=None, pooling: float = 3.0) -> dict:
    """Per-node latency table plus expectations under a batch-size distribution.

    ``batch_dist`` is a (sizes, probabilities) pair, a single batch size, or
    None for the fig-4-like default. ``pooling`` is the mean ids per SLS lookup.
    """
    if batch_dist is None:
        from .datagen import fig4_batch_distribution

        batch_dist = fig4_batch_distribution()
    if np.isscalar(batch_dist):
        sizes, probs = np.array([int(batch_dist)]), np.array([1.0])
    else:
        sizes, probs = (np.asarray(a) for a in batch_dist)
        probs = probs / probs.sum()
    rows = []
    expected = 0.0
    fc_mem_mass = 0.0
    n_fc = 0
    for n in g.nodes:
        lat1 = node_latency(n, g, 1, hw, pooling)
        if lat1 is None:
            continue
        exp_t, mem_mass = 0.0, 0.0
        for m, p in zip(sizes, probs):
            lat = node_latency(n, g, int(m), hw, pooling)
            exp_t += p * lat.t
            mem_mass += p * (lat.bound == "memory")
        expected += exp_t
        if n.kind in FC_KINDS:
            n_fc += 1
            fc_mem_mass += mem_mass
        rows.append(
            {
                "node": n.name,
                "kind": n.kind,
                "precision": n.precision,
                "t_m1": lat1.t,
                "bound_m1": lat1.bound,
                "bytes_m1": lat1.bytes,
                "flops_m1": lat1.flops,
                "expected_t": exp_t,
                "memory_bound_fraction": mem_mass,
            }
        )
    fc_weight_bytes = sum(r["bytes_m1"] for r in rows if r["kind"] in FC_KINDS)
    return {
        "hardware": hw.to_dict(),
        "batch_threshold_fp32": batch_threshold(hw),
        "nodes": rows,
        "expected_latency": expected,
        "fc_memory_bound_fraction": fc_mem_mass / n_fc if n_fc else 0.0,
        "fc_weight_bytes": fc_weight_bytes,
    }


def format_report(rep: dict) -> str:
    lines = [
        f"hardware {rep['hardware']['name']}: F={rep['hardware']['peak_flops']:.3g} E={rep['hardware']['efficiency']:.3g} B={rep['hardware']['mem_bandwidth']:.3g}",
        f"fp32 batch threshold {rep['batch_threshold_fp32']:.2f}",
        f"{'node':<16} {'kind':<18} {'prec':<5} {'t(m=1) us':>10} {'bound':>8} {'bytes':>10} {'E[t] us':>10} {'mem%':>6}",
    ]
    for r in rep["nodes"]:
        lines.append(
            f"{r['node']:<16} {r['kind']:<18} {r['precision']:<5} {r['t_m1'] * 1e6:>10.3f} {r['bound_m1']:>8} {r['bytes_m1']:>10.0f} {r['expected_t'] * 1e6:>10.3f} {100 * r['memory_bound_fraction']:>6.1f}"
        )
    lines.append(f"expected latency {rep['expected_latency'] * 1e6:.3f} us; FC evaluations memory bound {100 * rep['fc_memory_bound_fraction']:.1f}%")
    lines.append(f"FC weight bytes {rep['fc_weight_bytes']:.0f}")
    return "\n".join(lines) + "\n"
