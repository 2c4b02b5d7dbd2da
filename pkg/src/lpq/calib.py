"""Activation histograms and range derivation for static quantization."""

from __future__ import annotations

import json

import numpy as np

from .quant import UINT8, IntRange, RangeMethod

HISTOGRAM_VERSION = 1
DEFAULT_BINS = 2048
L2MIN_GRID = 64


class Histogram:
    """Fixed-bin-count histogram whose bounds grow by doubling.

    Bounds start at the extrema of the first batch. An element outside the
    current bounds doubles the width on that side; because the bin count is
    fixed, pairs of old bins fold exactly into one new bin.
    """

    def __init__(self, bins: int = DEFAULT_BINS):
        if bins < 2 or bins % 2:
            raise ValueError("bin count must be even and >= 2")
        self.bins = bins
        self.lo = 0.0
        self.hi = 0.0
        self.counts = np.zeros(bins, dtype=np.int64)
        self.running_min = np.inf
        self.running_max = -np.inf
        self.total = 0

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    @property
    def edges(self) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * np.arange(self.bins + 1) / self.bins

    @property
    def mids(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def copy(self) -> "Histogram":
        h = Histogram(self.bins)
        h.lo, h.hi = self.lo, self.hi
        h.counts = self.counts.copy()
        h.running_min, h.running_max, h.total = self.running_min, self.running_max, self.total
        return h

    def _grow_to(self, x_min: float, x_max: float) -> None:
        half = self.bins // 2
        while x_max > self.hi:
            folded = self.counts[0::2] + self.counts[1::2]
            self.counts = np.concatenate([folded, np.zeros(half, dtype=np.int64)])
            self.hi = self.lo + 2 * (self.hi - self.lo)
        while x_min < self.lo:
            folded = self.counts[0::2] + self.counts[1::2]
            self.counts = np.concatenate([np.zeros(half, dtype=np.int64), folded])
            self.lo = self.hi - 2 * (self.hi - self.lo)

    def _bin_index(self, x: np.ndarray) -> np.ndarray:
        idx = np.floor((x - self.lo) / (self.hi - self.lo) * self.bins).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def observe(self, x) -> "Histogram":
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return self
        if np.isnan(x).any():
            raise ValueError("histogram input contains NaN")
        if not np.isfinite(x).all():
            raise ValueError("histogram input contains Inf")
        x_min, x_max = float(x.min()), float(x.max())
        if self.total == 0 and self.hi == self.lo:
            self.lo, self.hi = x_min, x_max
            if self.hi == self.lo:
                pad = max(abs(x_min), 1.0) * 2.0**-10
                self.lo, self.hi = x_min - pad, x_max + pad
        self._grow_to(x_min, x_max)
        self.counts += np.bincount(self._bin_index(x), minlength=self.bins)
        self.total += x.size
        self.running_min = min(self.running_min, x_min)
        self.running_max = max(self.running_max, x_max)
        return self

    def merge(self, other: "Histogram") -> "Histogram":
        """New histogram holding both; other's bins are re-binned by midpoint."""
        if other.total == 0:
            return self.copy()
        if self.total == 0:
            return other.copy()
        out = self.copy()
        out._grow_to(other.lo, other.hi)
        nz = other.counts > 0
        idx = out._bin_index(other.mids[nz])
        np.add.at(out.counts, idx, other.counts[nz])
        out.total += other.total
        out.running_min = min(self.running_min, other.running_min)
        out.running_max = max(self.running_max, other.running_max)
        return out

    def to_dict(self) -> dict:
        return {
            "version": HISTOGRAM_VERSION,
            "bins": self.bins,
            "lo": self.lo,
            "hi": self.hi,
            "running_min": self.running_min if self.total else None,
            "running_max": self.running_max if self.total else None,
            "total": self.total,
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Histogram":
        if d.get("version") != HISTOGRAM_VERSION:
            raise ValueError(f"unsupported histogram version {d.get('version')}")
        h = cls(int(d["bins"]))
        h.lo, h.hi = float(d["lo"]), float(d["hi"])
        h.counts = np.asarray(d["counts"], dtype=np.int64)
        h.total = int(d["total"])
        if h.total:
            h.running_min, h.running_max = float(d["running_min"]), float(d["running_max"])
        if h.counts.sum() != h.total:
            raise ValueError("histogram counts do not sum to total")
        return h


def modeled_l2_error(h: Histogram, lo, hi, rng: IntRange = UINT8) -> np.ndarray:
    """Modeled squared quantization error of clipping to [lo, hi] (vectorized over windows).

    Bins whose midpoint falls inside the window contribute uniform rounding
    noise width_q^2 / 12; bins outside contribute their squared distance to
    the nearer clip bound. The quantization step uses the window widened to
    include zero, as the parameters will be.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    nz = h.counts > 0
    c = h.counts[nz].astype(np.float64)
    m = h.mids[nz]
    step = (np.maximum(hi, 0.0) - np.minimum(lo, 0.0)) / rng.levels
    below = m[None, :] < lo[:, None]
    above = m[None, :] > hi[:, None]
    inside = ~(below | above)
    dist = np.where(below, lo[:, None] - m[None, :], np.where(above, m[None, :] - hi[:, None], 0.0))
    err = (c[None, :] * dist**2).sum(axis=1) + (c[None, :] * inside).sum(axis=1) * step**2 / 12.0
    return err


def _quantile(h: Histogram, frac: float) -> float:
    target = frac * h.total
    cum = np.cumsum(h.counts)
    i = int(np.searchsorted(cum, target, side="left"))
    i = min(i, h.bins - 1)
    prev = cum[i - 1] if i > 0 else 0
    inbin = h.counts[i]
    t = 0.0 if inbin == 0 else (target - prev) / inbin
    return h.lo + (i + t) * h.width


def _l2min(h: Histogram, rng: IntRange, grid: int) -> tuple[float, float]:
    rmin, rmax = h.running_min, h.running_max
    pos = np.unique(np.linspace(0, h.bins, grid).round().astype(np.int64))
    edges = h.edges[pos]
    starts = np.clip(edges, rmin, rmax)
    ends = np.clip(edges, rmin, rmax)
    s, e = np.meshgrid(starts, ends, indexing="ij")
    keep = s < e
    cand_lo = np.concatenate([[rmin], s[keep]])
    cand_hi = np.concatenate([[rmax], e[keep]])
    err = modeled_l2_error(h, cand_lo, cand_hi, rng)
    # smallest error; ties go to the wider window, then the earlier candidate
    order = np.lexsort((np.arange(err.size), -(cand_hi - cand_lo), err))
    best = order[0]
    return float(cand_lo[best]), float(cand_hi[best])


def derive_range(
    h: Histogram, method: RangeMethod, rng: IntRange = UINT8, grid: int = L2MIN_GRID
) -> tuple[float, float]:
    if h.total == 0:
        raise ValueError("cannot derive a range from an empty histogram")
    rmin, rmax = float(h.running_min), float(h.running_max)
    if method.kind == "minmax" or rmin == rmax:
        return rmin, rmax
    if method.kind == "percentile":
        tail = (1.0 - method.q) / 2.0
        lo = _quantile(h, tail)
        hi = _quantile(h, 1.0 - tail)
        lo = min(max(lo, rmin), rmax)
        hi = min(max(hi, lo), rmax)
        return lo, hi
    return _l2min(h, rng, grid)


def collect(tensors: dict[str, np.ndarray], hists: dict[str, Histogram] | None = None) -> dict[str, Histogram]:
    """Feed a batch of named activations into per-tensor histograms."""
    hists = {} if hists is None else hists
    for name, x in tensors.items():
        hists.setdefault(name, Histogram()).observe(x)
    return hists


CALIB_VERSION = 1


def save_calibration(hists: dict[str, Histogram], path, meta: dict | None = None) -> None:
    doc = {
        "version": CALIB_VERSION,
        "meta": meta or {},
        "histograms": {k: hists[k].to_dict() for k in sorted(hists)},
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_calibration(path) -> dict[str, Histogram]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != CALIB_VERSION:
        raise ValueError(f"unsupported calibration artifact version {doc.get('version')}")
    return {k: Histogram.from_dict(v) for k, v in doc["histograms"].items()}
