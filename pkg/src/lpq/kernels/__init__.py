"""Deterministic reference kernels for every operator and precision.

The reduction loops live in a compiled core (``_ckernels``) when it has been
built, with a numpy fallback (``_pykernels``) that produces identical bits.
The implementation is picked at import time; ``set_impl`` overrides it.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass

import numpy as np

from ..numerics import KERNEL_POLICY, from_half, round_to_half
from ..quant import UINT8, IntRange, QuantParams, dequantize, quantize
from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_IMPLS = {"python": _pykernels}
if _ckernels is not None:
    _IMPLS["cython"] = _ckernels
_impl = _IMPLS.get("cython", _pykernels)

INT32_MAX = 2**31 - 1


class AccumulatorOverflowError(ArithmeticError):
    pass


def available_impls() -> list[str]:
    return sorted(_IMPLS)


def get_impl() -> str:
    return _impl.NAME


def set_impl(name: str) -> None:
    global _impl
    if name == "auto":
        name = "cython" if "cython" in _IMPLS else "python"
    if name not in _IMPLS:
        raise ValueError(f"kernel implementation {name!r} not available (have {available_impls()})")
    _impl = _IMPLS[name]


@contextlib.contextmanager
def using(name: str):
    prev = get_impl()
    set_impl(name)
    try:
        yield
    finally:
        set_impl(prev)


@dataclass
class QTensor:
    """Integer tensor plus the parameters that give it meaning."""

    q: np.ndarray
    params: QuantParams
    rng: IntRange = UINT8

    def dequantize(self) -> np.ndarray:
        return dequantize(self.q, self.params)


@dataclass(frozen=True)
class LutSpec:
    lo: float = -12.0
    hi: float = 12.0
    entries: int = 2048
    interpolation: str = "linear"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("LUT needs lo < hi")
        if self.entries < 2:
            raise ValueError("LUT needs at least 2 entries")
        if self.interpolation not in ("linear", "quadratic"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.interpolation == "quadratic" and self.entries < 3:
            raise ValueError("quadratic interpolation needs at least 3 entries")

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "entries": self.entries, "interpolation": self.interpolation}

    @classmethod
    def from_dict(cls, d: dict) -> "LutSpec":
        return cls(float(d["lo"]), float(d["hi"]), int(d["entries"]), d.get("interpolation", "linear"))


def half_values(x) -> np.ndarray:
    """Values rounded onto the fp16 grid with the kernel policy."""
    return round_to_half(x, KERNEL_POLICY)


# -- fully connected ---------------------------------------------------------


def _finish(acc: np.ndarray, bias, relu: bool) -> np.ndarray:
    y = acc if bias is None else acc + np.asarray(bias, dtype=np.float32)[None, :]
    return np.maximum(y, np.float32(0)) if relu else y


def fc_fp32(x, w, bias=None, relu: bool = False) -> np.ndarray:
    """y = x @ w + bias, accumulated left to right in fp32."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape} vs w {w.shape}")
    return _finish(_impl.matmul_fp32(x, w), bias, relu)


def fc_fp16(x, w_bits, bias=None, accum: str | None = None, relu: bool = False) -> np.ndarray:
    """FC with fp16-stored weights.

    ``accum=None`` widens the weights and computes in fp32 (storage only).
    ``accum="fp32"``/``"fp16"`` emulates fp16 compute: operands and every
    product are rounded to half, and the running sum is kept in the given
    precision.
    """
    w = from_half(w_bits)
    if accum is None:
        return fc_fp32(x, w, bias, relu)
    if accum not in ("fp32", "fp16"):
        raise ValueError(f"unknown accumulation mode {accum!r}")
    x = np.asarray(x, dtype=np.float32)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape} vs w {w.shape}")
    acc = _impl.matmul_fp16(half_values(x), w.astype(np.float64), accum == "fp16")
    return _finish(acc, bias, relu)


def int8_accumulate(a_q, a_zeropt: int, w_codes, w_zeropts) -> np.ndarray:
    """Zero-point-corrected integer GEMM: sum_t (a - z_a)(w - z_w), exact, as int64.

    Uses the expanded form with precomputed row and column offsets. Raises
    if any partial sum could leave the int32 accumulator.
    """
    a = np.asarray(a_q, dtype=np.float64)
    wc = np.asarray(w_codes, dtype=np.float64)
    n = a.shape[1]
    if n != wc.shape[0]:
        raise ValueError(f"shape mismatch: a {a.shape} vs w {wc.shape}")
    amax = float(np.abs(a).max(initial=0.0))
    wmax = float(np.abs(wc).max(initial=0.0))
    if n * amax * wmax > INT32_MAX:
        worst = float((np.abs(a) @ np.abs(wc)).max(initial=0.0))
        if worst > INT32_MAX:
            raise AccumulatorOverflowError(
                f"int32 accumulator overflow (bound {worst:.0f}) with reduction length {n}"
            )
    zw = np.broadcast_to(np.asarray(w_zeropts, dtype=np.float64), (wc.shape[1],))
    # products and sums are integers below 2^53, so fp64 GEMM is exact in any order
    acc = a @ wc
    col_off = wc.sum(axis=0)
    row_off = a.sum(axis=1)
    total = acc - a_zeropt * col_off[None, :] - row_off[:, None] * zw[None, :] + n * a_zeropt * zw[None, :]
    return total.astype(np.int64)


def fc_int8(
    a: QTensor,
    w_codes,
    w_scales,
    w_zeropts,
    bias=None,
    relu: bool = False,
    out_params: QuantParams | None = None,
    out_range: IntRange = UINT8,
):
    """Integer FC. Returns fp32 output, or a requantized QTensor when ``out_params`` is given.

    With fp32 output the bias stays fp32. When requantizing, the bias is
    folded into the accumulator as int32 at scale s_a * s_w.
    """
    total = int8_accumulate(a.q, a.params.zeropt, w_codes, w_zeropts)
    k = total.shape[1]
    mult = float(a.params.scale) * np.broadcast_to(np.asarray(w_scales, dtype=np.float64), (k,))
    b = np.zeros(k, dtype=np.float32) if bias is None else np.asarray(bias, dtype=np.float32)
    if out_params is None:
        y = (total * mult[None, :]).astype(np.float32) + b[None, :]
        return np.maximum(y, np.float32(0)) if relu else y
    bias_q = np.rint(b.astype(np.float64) / mult)
    if np.abs(total + bias_q[None, :]).max(initial=0) > INT32_MAX:
        raise AccumulatorOverflowError("int32 accumulator overflow after bias")
    y = (total + bias_q[None, :]) * mult[None, :]
    if relu:
        y = np.maximum(y, 0.0)
    q = np.clip(np.rint(y / out_params.scale) + out_params.zeropt, out_range.i_min, out_range.i_max)
    return QTensor(q.astype(np.int32), out_params, out_range)


def fc_forward(x, w, bias=None, mode: str = "fp32", **kw):
    """Dispatch by precision mode: fp32, fp16-storage, fp16-compute, int8."""
    relu = kw.pop("fused_relu", False)
    if mode == "fp32":
        return fc_fp32(x, w, bias, relu)
    if mode == "fp16-storage":
        return fc_fp16(x, w, bias, None, relu)
    if mode == "fp16-compute":
        return fc_fp16(x, w, bias, kw.pop("accum", "fp32"), relu)
    if mode == "int8":
        return fc_int8(x, w, kw.pop("w_scales"), kw.pop("w_zeropts"), bias, relu, **kw)
    raise ValueError(f"unknown FC mode {mode!r}")


# -- embeddings --------------------------------------------------------------


def sls_forward(table, offsets, ids, accum: str = "fp32") -> np.ndarray:
    """Pooled sum of the rows selected per sample; rowwise tables dequantize on the fly."""
    offsets = np.asarray(offsets, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        bad = ids[(ids < 0) | (ids >= table.rows)][0]
        raise IndexError(f"id {bad} out of range for table {table.name!r} with {table.rows} rows")
    if accum not in ("fp32", "fp16"):
        raise ValueError(f"unknown accumulation mode {accum!r}")
    acc16 = accum == "fp16"
    if table.bits == 32:
        return _impl.sls_fp32(table.data, offsets, ids, acc16)
    return _impl.sls_rowwise(table.data, table.scales, table.biases, table.dim, table.bits, offsets, ids, acc16)


# -- elementwise -------------------------------------------------------------


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float32), np.float32(0))


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_lut_cache: dict[LutSpec, np.ndarray] = {}


def _lut_table(spec: LutSpec) -> np.ndarray:
    t = _lut_cache.get(spec)
    if t is None:
        t = _sigmoid64(np.linspace(spec.lo, spec.hi, spec.entries))
        _lut_cache[spec] = t
    return t


def _sigmoid_lut(x: np.ndarray, spec: LutSpec) -> np.ndarray:
    t = _lut_table(spec)
    xc = np.clip(np.asarray(x, dtype=np.float64), spec.lo, spec.hi)
    pos = (xc - spec.lo) / (spec.hi - spec.lo) * (spec.entries - 1)
    if spec.interpolation == "linear":
        i = np.minimum(np.floor(pos).astype(np.int64), spec.entries - 2)
        f = pos - i
        return t[i] + f * (t[i + 1] - t[i])
    i = np.minimum(np.floor(pos).astype(np.int64), spec.entries - 3)
    f = pos - i
    y0, y1, y2 = t[i], t[i + 1], t[i + 2]
    return y0 * (f - 1) * (f - 2) / 2 - y1 * f * (f - 2) + y2 * f * (f - 1) / 2


def sigmoid(x, lut: LutSpec | None = None) -> np.ndarray:
    """Exact (fp64, rounded to fp32) or table-driven sigmoid."""
    y = _sigmoid64(x) if lut is None else _sigmoid_lut(x, lut)
    return y.astype(np.float32)


def swish(x, lut: LutSpec | None = None) -> np.ndarray:
    """x * sigmoid(x)."""
    x64 = np.asarray(x, dtype=np.float64)
    s = _sigmoid64(x64) if lut is None else _sigmoid_lut(x64, lut)
    return (x64 * s).astype(np.float32)


# -- batched matmul ----------------------------------------------------------


def batchmatmul(a, c, precision: str = "fp32", accum: str = "fp32") -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    c = np.asarray(c, dtype=np.float32)
    if a.ndim != 3 or c.ndim != 3 or a.shape[0] != c.shape[0] or a.shape[2] != c.shape[1]:
        raise ValueError(f"batchmatmul shape mismatch: {a.shape} x {c.shape}")
    if precision == "fp32":
        return _impl.bmm_fp32(a, c)
    if precision != "fp16":
        raise ValueError(f"unknown batchmatmul precision {precision!r}")
    return _impl.bmm_fp16(half_values(a), half_values(c), accum == "fp16")


# -- quantize / dequantize ---------------------------------------------------


def quantize_op(x, params: QuantParams, rng: IntRange = UINT8) -> QTensor:
    return QTensor(quantize(x, params, rng), params, rng)


def dequantize_op(t: QTensor) -> np.ndarray:
    return t.dequantize()


def requantize_op(t: QTensor, params: QuantParams, rng: IntRange = UINT8) -> QTensor:
    """Dequantize with the tensor's own params, then quantize with ``params``."""
    return quantize_op(t.dequantize(), params, rng)
