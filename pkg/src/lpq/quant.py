"""Linear quantization: (scale, zeropt) for activations/weights, (scale, bias) for embedding rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DEFAULT_POLICY, HALF_MAX, KERNEL_POLICY, from_half, round_half_even, to_half


@dataclass(frozen=True)
class IntRange:
    bit_width: int
    signed: bool

    def __post_init__(self):
        if self.bit_width not in (4, 8):
            raise ValueError(f"unsupported bit width {self.bit_width}")

    @property
    def i_min(self) -> int:
        return -(1 << (self.bit_width - 1)) if self.signed else 0

    @property
    def i_max(self) -> int:
        return (1 << (self.bit_width - 1)) - 1 if self.signed else (1 << self.bit_width) - 1

    @property
    def levels(self) -> int:
        return self.i_max - self.i_min

    def to_dict(self) -> dict:
        return {"bit_width": self.bit_width, "signed": self.signed}

    @classmethod
    def from_dict(cls, d: dict) -> "IntRange":
        return cls(int(d["bit_width"]), bool(d["signed"]))


UINT8 = IntRange(8, False)
INT8 = IntRange(8, True)
UINT4 = IntRange(4, False)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zeropt: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zeropt": self.zeropt}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zeropt"]))


@dataclass(frozen=True)
class RowQuantParams:
    """Per-row (scale, bias); values are already rounded to their storage precision."""

    scale: float
    bias: float


@dataclass(frozen=True)
class Granularity:
    kind: str = "per_tensor"
    axis: int = 1  # output-channel axis of an (in, out) weight matrix

    def __post_init__(self):
        if self.kind not in ("per_tensor", "per_channel", "per_row"):
            raise ValueError(f"unknown granularity {self.kind!r}")


PER_TENSOR = Granularity("per_tensor")
PER_CHANNEL = Granularity("per_channel")


@dataclass(frozen=True)
class RangeMethod:
    kind: str = "minmax"
    q: float = 1.0

    def __post_init__(self):
        if self.kind not in ("minmax", "percentile", "l2min"):
            raise ValueError(f"unknown range method {self.kind!r}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"percentile fraction must be in (0, 1], got {self.q}")

    @classmethod
    def minmax(cls) -> "RangeMethod":
        return cls("minmax")

    @classmethod
    def percentile(cls, q: float = 0.99) -> "RangeMethod":
        return cls("percentile", q)

    @classmethod
    def l2min(cls) -> "RangeMethod":
        return cls("l2min")

    @property
    def label(self) -> str:
        return f"percentile({self.q:g})" if self.kind == "percentile" else self.kind

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "percentile":
            d["q"] = self.q
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RangeMethod":
        return cls(d["kind"], float(d.get("q", 1.0)))


# -- scale / zero point ------------------------------------------------------


_SCALE_FLOOR = float(np.finfo(np.float64).tiny)


def compute_qparams(x_min: float, x_max: float, rng: IntRange = UINT8) -> QuantParams:
    """Asymmetric (scale, zeropt) for a real range, widened to contain zero."""
    if x_min > x_max:
        raise ValueError(f"x_min {x_min} > x_max {x_max}")
    lo = min(float(x_min), 0.0)
    hi = max(float(x_max), 0.0)
    if hi == lo:
        return QuantParams(1.0, rng.i_max)
    # ranges in the fp64 subnormals would underflow the scale to zero
    scale = max((hi - lo) / rng.levels, _SCALE_FLOOR)
    zeropt = round_half_even(rng.i_max - hi / scale)
    zeropt = min(max(zeropt, rng.i_min), rng.i_max)
    return QuantParams(scale, zeropt)


def compute_symmetric_qparams(absmax: float, rng: IntRange = INT8) -> QuantParams:
    """Symmetric params (zeropt = 0) covering [-absmax, absmax] on a signed range."""
    if not rng.signed:
        raise ValueError("symmetric quantization needs a signed integer range")
    absmax = abs(float(absmax))
    if absmax == 0.0:
        return QuantParams(1.0, 0)
    return QuantParams(max(absmax / rng.i_max, _SCALE_FLOOR), 0)


def quantize(x, p: QuantParams, rng: IntRange = UINT8) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("cannot quantize non-finite values")
    q = np.rint(x / p.scale) + p.zeropt
    return np.clip(q, rng.i_min, rng.i_max).astype(np.int32)


def dequantize(q, p: QuantParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.int64)
    return (p.scale * (q - p.zeropt).astype(np.float64)).astype(np.float32)


def quant_error_l2(x, p: QuantParams, rng: IntRange = UINT8) -> float:
    x = np.asarray(x, dtype=np.float32)
    r = dequantize(quantize(x, p, rng), p)
    return float(np.linalg.norm((x.astype(np.float64) - r.astype(np.float64)).ravel()))


# -- range selection ---------------------------------------------------------


def select_range(data, method: RangeMethod, rng: IntRange = UINT8) -> tuple[float, float]:
    """Effective (x_min, x_max) of a tensor or a Histogram."""
    from .calib import Histogram, derive_range

    if isinstance(data, Histogram):
        return derive_range(data, method, rng)
    x = np.asarray(data, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("select_range needs a nonempty input")
    if method.kind == "minmax":
        return float(x.min()), float(x.max())
    if method.kind == "percentile":
        tail = (1.0 - method.q) / 2.0
        lo, hi = np.quantile(x, [tail, 1.0 - tail])
        return float(lo), float(hi)
    h = Histogram()
    h.observe(x)
    return derive_range(h, method, rng)


# -- weights -----------------------------------------------------------------


@dataclass
class WeightQuant:
    """Quantized weight matrix with one parameter pair per tensor or per output channel."""

    codes: np.ndarray  # int32, shape of the weight
    scales: np.ndarray  # float64, (k,) for per-channel, (1,) for per-tensor
    zeropts: np.ndarray  # int64, same shape as scales
    rng: IntRange
    granularity: Granularity

    def channel_params(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-output-channel (scales, zeropts), broadcasting per-tensor params."""
        return np.broadcast_to(self.scales, (k,)).copy(), np.broadcast_to(self.zeropts, (k,)).copy()

    def dequantize(self) -> np.ndarray:
        k = self.codes.shape[1]
        s, z = self.channel_params(k)
        return (s[None, :] * (self.codes - z[None, :]).astype(np.float64)).astype(np.float32)


def _weight_params(w: np.ndarray, method: RangeMethod, symmetric: bool) -> tuple[QuantParams, IntRange]:
    lo, hi = select_range(w, method, INT8 if symmetric else UINT8)
    if symmetric:
        return compute_symmetric_qparams(max(abs(lo), abs(hi)), INT8), INT8
    return compute_qparams(lo, hi, UINT8), UINT8


def quantize_weight(
    w,
    granularity: Granularity = PER_TENSOR,
    method: RangeMethod = RangeMethod.minmax(),
    symmetric: bool = True,
) -> WeightQuant:
    """Quantize an (in, out) weight matrix. Symmetric -> int8, asymmetric -> uint8."""
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ValueError("weight must be 2-D (in_features, out_features)")
    if granularity.kind == "per_tensor":
        p, rng = _weight_params(w, method, symmetric)
        codes = quantize(w, p, rng)
        return WeightQuant(codes, np.array([p.scale]), np.array([p.zeropt], dtype=np.int64), rng, granularity)
    if granularity.kind != "per_channel":
        raise ValueError(f"{granularity.kind} does not apply to weight matrices")
    k = w.shape[1]
    scales = np.empty(k)
    zeropts = np.empty(k, dtype=np.int64)
    codes = np.empty(w.shape, dtype=np.int32)
    rng = INT8 if symmetric else UINT8
    for j in range(k):
        p, rng = _weight_params(w[:, j], method, symmetric)
        scales[j] = p.scale
        zeropts[j] = p.zeropt
        codes[:, j] = quantize(w[:, j], p, rng)
    return WeightQuant(codes, scales, zeropts, rng, granularity)


# -- rowwise (embedding tables) ----------------------------------------------


def _half_directed(values: np.ndarray, up: bool) -> np.ndarray:
    """Round to fp16 toward +inf (``up``) or -inf, clamped to the finite half range."""
    v = np.clip(np.asarray(values, dtype=np.float64), -HALF_MAX, HALF_MAX)
    h = from_half(to_half(v, KERNEL_POLICY)).astype(np.float16)
    off = h > v if not up else h < v
    h[off] = np.nextafter(h[off], np.float16(np.inf if up else -np.inf))
    return h.astype(np.float32)


def compute_rowwise_params(table, rng: IntRange = UINT8) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized row params for a 2-D table: (scales, biases) as float32 storage values.

    8-bit rows keep fp32 metadata. 4-bit rows store fp16 metadata: the bias is
    rounded down and the scale is derived from the stored bias and rounded up,
    so the quantization grid still spans the whole row.
    """
    t = np.asarray(table, dtype=np.float32)
    if t.ndim != 2 or t.shape[1] == 0:
        raise ValueError("table must be 2-D with nonempty rows")
    if not np.isfinite(t).all():
        raise ValueError("table contains non-finite values")
    lo = t.min(axis=1).astype(np.float64)
    hi = t.max(axis=1).astype(np.float64)
    if rng.bit_width == 8:
        scale = np.where(hi == lo, 1.0, (hi - lo) / rng.levels).astype(np.float32)
        # a span in the fp32 subnormals must not round the scale to zero
        scale = np.maximum(scale, np.nextafter(np.float32(0), np.float32(1)))
        return scale, lo.astype(np.float32)
    bias = _half_directed(lo, up=False)
    span = hi - bias.astype(np.float64)
    scale = _half_directed(np.where(span > 0, span / rng.levels, 1.0), up=True)
    return scale, bias


def compute_row_params(row, rng: IntRange = UINT8) -> RowQuantParams:
    s, b = compute_rowwise_params(np.asarray(row, dtype=np.float32)[None, :], rng)
    return RowQuantParams(float(s[0]), float(b[0]))


def quantize_rows(table, scales, biases, rng: IntRange = UINT8) -> np.ndarray:
    t = np.asarray(table, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)[:, None]
    b = np.asarray(biases, dtype=np.float64)[:, None]
    q = np.rint((t - b) / s)
    return np.clip(q, rng.i_min, rng.i_max).astype(np.uint8)


def dequantize_rows(codes, scales, biases) -> np.ndarray:
    """scale * q + bias evaluated in fp64 and rounded once to fp32."""
    q = np.asarray(codes).astype(np.float64)
    s = np.asarray(scales, dtype=np.float32).astype(np.float64)[..., None]
    b = np.asarray(biases, dtype=np.float32).astype(np.float64)[..., None]
    return (s * q + b).astype(np.float32)


def quantize_row(row, p: RowQuantParams, rng: IntRange = UINT8) -> np.ndarray:
    """Codes for one row; 4-bit rows come back packed two per byte."""
    q = quantize_rows(np.asarray(row)[None, :], [p.scale], [p.bias], rng)[0]
    return pack_int4(q) if rng.bit_width == 4 else q


def dequantize_row(codes, p: RowQuantParams, rng: IntRange = UINT8, dim: int | None = None) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    if rng.bit_width == 4:
        codes = unpack_int4(codes, dim if dim is not None else 2 * codes.size)
    return dequantize_rows(codes[None, :], [p.scale], [p.bias])[0]


def pack_int4(codes) -> np.ndarray:
    """Pack 4-bit codes two per byte along the last axis; even index in the low nibble."""
    c = np.asarray(codes, dtype=np.uint8)
    if (c > 15).any():
        raise ValueError("int4 codes must be in [0, 15]")
    if c.shape[-1] % 2:
        c = np.concatenate([c, np.zeros(c.shape[:-1] + (1,), dtype=np.uint8)], axis=-1)
    return (c[..., 0::2] | (c[..., 1::2] << 4)).astype(np.uint8)


def unpack_int4(packed, n: int) -> np.ndarray:
    p = np.asarray(packed, dtype=np.uint8)
    out = np.empty(p.shape[:-1] + (2 * p.shape[-1],), dtype=np.uint8)
    out[..., 0::2] = p & 0x0F
    out[..., 1::2] = p >> 4
    return out[..., :n]


def rowwise_storage_bytes(rows: int, dim: int, bit_width: int) -> int:
    """Bytes for a rowwise table: codes plus trailing (scale, bias) per row."""
    if bit_width == 8:
        return rows * (dim + 8)
    if bit_width == 4:
        return rows * ((dim + 1) // 2 + 4)
    if bit_width == 32:
        return rows * dim * 4
    raise ValueError(f"unsupported table bit width {bit_width}")
