"""Independent fp64 interpreter for float graphs.

Shares no code with the kernels: plain numpy fp64 arithmetic throughout.
Used as the accuracy oracle and as the label teacher for generated data.
"""

from __future__ import annotations

import numpy as np

from ..dataset import Dataset
from .ir import BMM, CONCAT, FC_KINDS, FC_RELU, RELU, SIGMOID, SLS, SWISH, ModelGraph


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _table64(t) -> np.ndarray:
    if t.bits == 32:
        return t.data.astype(np.float64)
    if t.bits == 8:
        codes = t.data.astype(np.float64)
    else:
        lo = (t.data & 0x0F).astype(np.float64)
        hi = (t.data >> 4).astype(np.float64)
        codes = np.empty((t.rows, 2 * t.data.shape[1]))
        codes[:, 0::2], codes[:, 1::2] = lo, hi
        codes = codes[:, : t.dim]
    return codes * t.scales.astype(np.float64)[:, None] + t.biases.astype(np.float64)[:, None]


def run64(g: ModelGraph, batch: Dataset) -> np.ndarray:
    env: dict = {g.io["dense"]: batch.dense.astype(np.float64)}
    for name, o, i in zip(g.io["sparse"], batch.offsets, batch.ids):
        env[name] = (o, i)
    tables = {}
    for n in g.nodes:
        ins = [env[t] for t in n.inputs]
        if n.kind in FC_KINDS:
            if n.precision not in ("fp32",):
                raise ValueError(f"fp64 interpreter only handles float FCs ({n.name} is {n.precision})")
            y = ins[0] @ g.weights[n.attrs["weight"]].astype(np.float64)
            if n.attrs.get("bias"):
                y = y + g.weights[n.attrs["bias"]].astype(np.float64)
            if n.kind == FC_RELU:
                y = np.maximum(y, 0.0)
        elif n.kind == RELU:
            y = np.maximum(ins[0], 0.0)
        elif n.kind == SIGMOID:
            y = _sig(ins[0])
        elif n.kind == SWISH:
            y = ins[0] * _sig(ins[0])
        elif n.kind == CONCAT:
            y = np.concatenate(ins, axis=1)
        elif n.kind == SLS:
            key = n.attrs["table"]
            if key not in tables:
                tables[key] = _table64(g.tables[key])
            tab = tables[key]
            offsets, ids = ins[0]
            seg = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
            y = np.zeros((len(offsets) - 1, tab.shape[1]))
            np.add.at(y, seg, tab[ids])
        elif n.kind == BMM:
            z = np.stack(ins, axis=1)
            zz = np.einsum("bfd,bgd->bfg", z, z)
            li, lj = np.tril_indices(z.shape[1], -1)
            y = zz[:, li, lj]
        else:
            raise ValueError(f"fp64 interpreter does not handle {n.kind}")
        env[n.outputs[0]] = y
    return env[g.io["output"]].reshape(-1)


def predict64(g: ModelGraph, data: Dataset, batch_size: int = 4096) -> np.ndarray:
    return np.concatenate([run64(g, b) for b in data.batches(batch_size)])
