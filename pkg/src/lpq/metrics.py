"""Normalized entropy, relative NE difference, per-layer error and flops accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .graph.execute import shadow_execute
from .graph.ir import BMM, FC_KINDS, ModelGraph
from .scheme import QuantScheme

EPS = 1e-7
NE_DIFF_MAX = 0.0005


class DegenerateLabelsError(ValueError):
    pass


def _clamp(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def cross_entropy(preds, labels, weights=None) -> np.ndarray:
    """Per-sample weighted cross entropy, natural log, fp64."""
    p = _clamp(preds)
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=np.float64)
    return -w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def cross_entropy_sample(p: float, label: float, weight: float = 1.0) -> float:
    return float(cross_entropy(np.array([p]), np.array([label]), np.array([weight]))[0])


@dataclass(frozen=True)
class NEResult:
    ne: float
    p_star: float
    numerator: float
    denominator: float


@dataclass(frozen=True)
class NEComparison:
    ne_lowp: float
    ne_fp32: float
    ne_diff: float

    def passes(self, threshold: float = NE_DIFF_MAX) -> bool:
        return self.ne_diff <= threshold

    def to_dict(self) -> dict:
        return {"ne_lowp": self.ne_lowp, "ne_fp32": self.ne_fp32, "ne_diff": self.ne_diff}


def _labels(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        if data.labels is None:
            raise ValueError("dataset has no labels")
        return data.labels, data.weights
    labels, weights = data
    labels = np.asarray(labels, dtype=np.float64)
    return labels, (np.ones_like(labels) if weights is None else np.asarray(weights, dtype=np.float64))


def normalized_entropy(preds, data) -> NEResult:
    """NE = sum_i CE(p_i) / sum_i CE(p*), with p* the weighted positive rate.

    ``data`` is a labeled Dataset or a (labels, weights) pair. Sums are exact
    (correctly rounded) fp64 sums, so the numerator equals the fsum of the
    per-sample cross entropies.
    """
    y, w = _labels(data)
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    if not ((y == 1).any() and (y == 0).any()):
        raise DegenerateLabelsError("NE needs both label classes present")
    p_star = math.fsum(w * y) / math.fsum(w)
    num = math.fsum(cross_entropy(p, y, w))
    den = math.fsum(cross_entropy(np.full_like(p, p_star), y, w))
    return NEResult(num / den, p_star, num, den)


def ne_diff(lowp: NEResult, fp32: NEResult) -> NEComparison:
    if not fp32.ne > 0:
        raise ValueError("reference NE must be positive")
    return NEComparison(lowp.ne, fp32.ne, (lowp.ne - fp32.ne) / fp32.ne)


def compare_predictions(p_lowp, p_fp32, data) -> NEComparison:
    return ne_diff(normalized_entropy(p_lowp, data), normalized_entropy(p_fp32, data))


def two_diff(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Error-free a - b = hi + lo (Knuth TwoSum)."""
    hi = a - b
    bv = hi - a
    av = hi - bv
    lo = (a - av) + (-b - bv)
    return hi, lo


def exact_delta_total(hi, lo) -> float:
    """Correctly rounded sum of per-sample deltas carried as (hi, lo) pairs."""
    return math.fsum(np.concatenate([np.asarray(hi, dtype=np.float64), np.asarray(lo, dtype=np.float64)]))


# -- per-layer error ---------------------------------------------------------


def per_layer_error(g_quantized: ModelGraph, g_reference: ModelGraph, batches) -> dict[str, float]:
    """Relative L2 error of every FC (0 for float layers) and every other low-precision node."""
    if isinstance(batches, Dataset):
        batches = [batches]
    stats = shadow_execute(g_quantized, g_reference, batches)
    out = {n.name: 0.0 for n in g_quantized.fc_nodes()}
    out.update({k: s.rel_l2 for k, s in stats.items()})
    return out


# -- flops -------------------------------------------------------------------


def node_flops(n, g: ModelGraph, m: int = 1) -> float:
    if n.kind in FC_KINDS:
        return 2.0 * m * n.attrs["in_dim"] * n.attrs["out_dim"]
    if n.kind == BMM:
        f = len(n.inputs)
        d = n.attrs.get("dim", 0)
        return 2.0 * m * f * d * f
    return 0.0


def graph_flops(g: ModelGraph, m: int = 1) -> float:
    return float(sum(node_flops(n, g, m) for n in g.nodes))


def fc_flops(g: ModelGraph) -> dict[str, float]:
    return {n.name: node_flops(n, g) for n in g.fc_nodes()}


def skipped_names(g: ModelGraph, scheme: QuantScheme) -> list[str]:
    fcs = g.fc_nodes()
    names = [n.name for n in fcs if scheme.skipped(n.name)]
    if scheme.global_.skip_last_fc and fcs and fcs[-1].name not in names:
        names.append(fcs[-1].name)
    return names


def skipped_flops_ratio(g: ModelGraph, scheme: QuantScheme) -> float:
    flops = fc_flops(g)
    total = sum(flops.values())
    if total == 0:
        return 0.0
    return sum(flops[n] for n in skipped_names(g, scheme)) / total
