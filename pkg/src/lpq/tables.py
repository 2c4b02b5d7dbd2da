"""Embedding tables in fp32 or rowwise int8/int4 form."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import from_half, to_half
from .quant import UINT4, UINT8, compute_rowwise_params, dequantize_rows, pack_int4, quantize_rows, unpack_int4


@dataclass
class EmbeddingTable:
    """One table. ``data`` is fp32 (rows, dim) or packed codes (rows, code_bytes).

    For rowwise tables ``scales``/``biases`` hold the per-row metadata as
    float32 arrays; 4-bit tables keep them on the fp16 grid (stored as fp16).
    """

    name: str
    bits: int
    dim: int
    data: np.ndarray
    scales: np.ndarray | None = None
    biases: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def code_bytes(self) -> int:
        return {32: 4 * self.dim, 8: self.dim, 4: (self.dim + 1) // 2}[self.bits]

    @property
    def meta_bytes(self) -> int:
        return {32: 0, 8: 8, 4: 4}[self.bits]

    @property
    def storage_bytes(self) -> int:
        return self.rows * (self.code_bytes + self.meta_bytes)

    def dequantized(self) -> np.ndarray:
        if self.bits == 32:
            return self.data
        codes = unpack_int4(self.data, self.dim) if self.bits == 4 else self.data
        return dequantize_rows(codes, self.scales, self.biases)

    def take(self, row_ids) -> "EmbeddingTable":
        """A new table with only the given rows, in the given order."""
        r = np.asarray(row_ids, dtype=np.int64)
        return replace(
            self,
            data=self.data[r].copy(),
            scales=None if self.scales is None else self.scales[r].copy(),
            biases=None if self.biases is None else self.biases[r].copy(),
        )

    # rowwise blob layout: per row, codes then (scale, bias); fp32 for 8-bit, fp16 for 4-bit
    def to_bytes(self) -> bytes:
        if self.bits == 32:
            return np.ascontiguousarray(self.data, dtype="<f4").tobytes()
        if self.bits == 8:
            meta = np.stack([self.scales, self.biases], axis=1).astype("<f4").view(np.uint8)
        else:
            meta = to_half(np.stack([self.scales, self.biases], axis=1)).astype("<u2").view(np.uint8)
        return np.concatenate([self.data, meta], axis=1).tobytes()

    @classmethod
    def from_bytes(cls, name: str, bits: int, rows: int, dim: int, buf: bytes) -> "EmbeddingTable":
        if bits == 32:
            data = np.frombuffer(buf, dtype="<f4").reshape(rows, dim).astype(np.float32)
            return cls(name, 32, dim, data)
        t = cls(name, bits, dim, np.zeros((0, 0), dtype=np.uint8))
        raw = np.frombuffer(buf, dtype=np.uint8).reshape(rows, t.code_bytes + t.meta_bytes)
        data = raw[:, : t.code_bytes].copy()
        meta = np.ascontiguousarray(raw[:, t.code_bytes :])
        if bits == 8:
            m = meta.view("<f4").astype(np.float32)
        else:
            m = from_half(meta.view("<u2"))
        return cls(name, bits, dim, data, m[:, 0].copy(), m[:, 1].copy())


def quantize_table(table: EmbeddingTable, bits: int) -> EmbeddingTable:
    """Rowwise-quantize an fp32 table to 8 or 4 bits."""
    if table.bits != 32:
        raise ValueError(f"table {table.name!r} is already quantized ({table.bits}-bit)")
    if bits == 32:
        return table
    rng = {8: UINT8, 4: UINT4}.get(bits)
    if rng is None:
        raise ValueError(f"unsupported table bit width {bits}")
    scales, biases = compute_rowwise_params(table.data, rng)
    codes = quantize_rows(table.data, scales, biases, rng)
    if bits == 4:
        codes = pack_int4(codes)
    return EmbeddingTable(table.name, bits, table.dim, codes, scales, biases)
