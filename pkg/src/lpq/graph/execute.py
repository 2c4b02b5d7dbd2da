"""Graph execution: deterministic topological interpretation over the kernels."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .. import kernels as K
from ..dataset import Dataset
from ..numerics import from_half
from ..quant import IntRange, QuantParams, compute_qparams
from .ir import BMM, CONCAT, DEQUANTIZE, FC_KINDS, FC_RELU, QUANTIZE, RELU, SIGMOID, SLS, SWISH, ModelGraph, Node


class MissingBlobError(KeyError):
    pass


def qparams_of(d: dict | None) -> QuantParams | None:
    return None if d is None else QuantParams.from_dict(d)


def range_of(d: dict | None) -> IntRange:
    return K.UINT8 if d is None else IntRange.from_dict(d)


def pairwise_dot(feats: list[np.ndarray], precision: str = "fp32", accum: str = "fp32") -> np.ndarray:
    """Strict lower triangle of Z Z^T for Z = stacked feature vectors, row-major order."""
    z = np.stack([np.asarray(f, dtype=np.float32) for f in feats], axis=1)
    zz = K.batchmatmul(z, np.ascontiguousarray(z.transpose(0, 2, 1)), precision, accum)
    li, lj = np.tril_indices(z.shape[1], -1)
    return np.ascontiguousarray(zz[:, li, lj])


@dataclass
class Backend:
    """Reference backend. The optional fields force emulation choices onto every node.

    ``sls_accum`` / ``fc16_accum``: override the accumulator of SLS and fp16 FC
    nodes. ``lut``: evaluate every Sigmoid/Swish through this table.
    ``impl``: kernel implementation ("cython" / "python") used while running.
    ``kinds``: node kinds this backend implements (None means all).
    """

    name: str = "reference"
    sls_accum: str | None = None
    fc16_accum: str | None = None
    lut: K.LutSpec | None = None
    impl: str | None = None
    kinds: frozenset | None = None

    def supports(self, kind: str) -> bool:
        return self.kinds is None or kind in self.kinds

    def session(self):
        return K.using(self.impl) if self.impl else contextlib.nullcontext()

    # -- per-kind evaluation ------------------------------------------------

    def fc(self, node: Node, x, g: ModelGraph, relu: bool):
        a = node.attrs
        w = _blob(g, a["weight"])
        b = _blob(g, a["bias"]) if a.get("bias") else None
        if node.precision == "fp32":
            return K.fc_fp32(x, w, b, relu)
        if node.precision == "fp16":
            accum = self.fc16_accum or node.accum
            return K.fc_fp16(x, w, b, accum, relu)
        if not isinstance(x, K.QTensor):
            raise TypeError(f"{node.name}: int8 FC needs a quantized input")
        return K.fc_int8(
            x,
            w,
            np.asarray(a["w_scales"], dtype=np.float64),
            np.asarray(a["w_zeropts"], dtype=np.int64),
            b,
            relu,
            qparams_of(a.get("out_qparams")),
            range_of(a.get("out_range")),
        )

    def sls(self, node: Node, sparse, g: ModelGraph):
        offsets, ids = sparse
        tab = g.tables.get(node.attrs["table"])
        if tab is None:
            raise MissingBlobError(f"{node.name}: missing table {node.attrs['table']!r}")
        return K.sls_forward(tab, offsets, ids, self.sls_accum or node.accum or "fp32")

    def lut_for(self, node: Node) -> K.LutSpec | None:
        if self.lut is not None:
            return self.lut
        d = node.attrs.get("lut")
        return None if d is None else K.LutSpec.from_dict(d)

    def quantize(self, node: Node, x):
        a = node.attrs
        rng = range_of(a.get("range"))
        if a.get("requant"):
            return K.requantize_op(x, qparams_of(a["qparams"]), rng)
        if a.get("dynamic"):
            x = np.asarray(x, dtype=np.float32)
            p = compute_qparams(float(x.min(initial=0.0)), float(x.max(initial=0.0)), rng)
            return K.quantize_op(x, p, rng)
        return K.quantize_op(x, qparams_of(a["qparams"]), rng)

    def execute(self, node: Node, ins: list, g: ModelGraph):
        k = node.kind
        if not self.supports(k):
            raise NotImplementedError(f"backend {self.name!r} has no kernel for {k}")
        if k in FC_KINDS:
            return self.fc(node, ins[0], g, k == FC_RELU)
        if k == RELU:
            return K.relu(ins[0])
        if k == SIGMOID:
            return K.sigmoid(ins[0], self.lut_for(node))
        if k == SWISH:
            return K.swish(ins[0], self.lut_for(node))
        if k == CONCAT:
            return np.concatenate([np.asarray(t, dtype=np.float32) for t in ins], axis=1)
        if k == SLS:
            return self.sls(node, ins[0], g)
        if k == BMM:
            if node.attrs.get("mode", "pairwise_dot") == "pairwise_dot":
                return pairwise_dot(ins, node.precision, node.accum or "fp32")
            return K.batchmatmul(ins[0], ins[1], node.precision, node.accum or "fp32")
        if k == QUANTIZE:
            return self.quantize(node, ins[0])
        if k == DEQUANTIZE:
            return K.dequantize_op(ins[0])
        raise NotImplementedError(f"backend {self.name!r} has no kernel for {k}")


REFERENCE = Backend()


def _blob(g: ModelGraph, key: str) -> np.ndarray:
    try:
        return g.weights[key]
    except KeyError:
        raise MissingBlobError(f"missing weight blob {key!r}") from None


def feeds(g: ModelGraph, batch: Dataset) -> dict:
    """Initial tensor environment for a batch."""
    if batch.dense.shape[1] != g.io["dense_dim"]:
        raise ValueError(f"batch dense width {batch.dense.shape[1]} != model input {g.io['dense_dim']}")
    if batch.num_slots != len(g.io["sparse"]):
        raise ValueError(f"batch has {batch.num_slots} sparse slots, model expects {len(g.io['sparse'])}")
    env = {g.io["dense"]: batch.dense}
    for name, o, i in zip(g.io["sparse"], batch.offsets, batch.ids):
        env[name] = (o, i)
    return env


def trace(g: ModelGraph, batch: Dataset, backend: Backend | None = None, hook=None) -> dict:
    """Run every node in list order and return the full tensor environment.

    ``hook(node, inputs, outputs)`` is called after each node.
    """
    be = backend or REFERENCE
    env = feeds(g, batch)
    with be.session():
        for node in g.nodes:
            ins = [env[t] for t in node.inputs]
            out = be.execute(node, ins, g)
            env[node.outputs[0]] = out
            if hook is not None:
                hook(node, ins, out)
    return env


def run(g: ModelGraph, batch: Dataset, backend: Backend | None = None, hook=None) -> np.ndarray:
    """Predicted probabilities, shape (N,), fp32."""
    env = trace(g, batch, backend, hook)
    return np.asarray(env[g.io["output"]], dtype=np.float32).reshape(-1)


def predict(g: ModelGraph, data: Dataset, batch_size: int = 4096, backend: Backend | None = None) -> np.ndarray:
    if len(data) == 0:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate([run(g, b, backend) for b in data.batches(batch_size)])


def as_float(t) -> np.ndarray:
    return t.dequantize() if isinstance(t, K.QTensor) else np.asarray(t, dtype=np.float32)


# -- shadow execution --------------------------------------------------------


def is_lowp(node: Node, g: ModelGraph) -> bool:
    """Nodes whose numerics differ from their fp32 twin."""
    if node.kind in FC_KINDS or node.kind == BMM:
        return node.precision != "fp32"
    if node.kind == SLS:
        tab = g.tables.get(node.attrs["table"])
        return (tab is not None and tab.bits != 32) or node.accum == "fp16"
    if node.kind in (SIGMOID, SWISH):
        return node.attrs.get("lut") is not None
    return False


@dataclass
class ShadowStat:
    node: str
    kind: str
    sq_err: float = 0.0
    sq_ref: float = 0.0
    count: int = 0
    lowp: list = field(default_factory=list)
    ref: list = field(default_factory=list)
    inputs: list = field(default_factory=list)

    @property
    def rel_l2(self) -> float:
        return float(np.sqrt(self.sq_err) / (np.sqrt(self.sq_ref) + 1e-12))


def _layer_input(node: Node, env: dict, prod: dict[str, Node]):
    """Float input of a layer: for int8 FCs the tensor feeding their Quantize node."""
    t = node.inputs[0]
    src = prod.get(t)
    if node.kind in FC_KINDS and node.precision == "int8" and src is not None and src.kind == QUANTIZE and not src.attrs.get("requant"):
        return as_float(env[src.inputs[0]])
    return as_float(env[t])


def shadow_execute(
    g_lowp: ModelGraph,
    g_ref: ModelGraph,
    batches,
    backend: Backend | None = None,
    keep: bool = False,
    twin: Backend | None = None,
) -> dict[str, ShadowStat]:
    """Run ``g_lowp``; at each low-precision node also run its fp32 twin on the same float inputs.

    The twin takes its weights/tables from the same-named node of ``g_ref``
    and applies Relu when the low-precision node is a fused FCRelu. Errors are
    aggregated (squared L2) over all batches.
    """
    prod = g_lowp.producers()
    ref_nodes = {n.name: n for n in g_ref.nodes}
    tw = twin or REFERENCE
    stats: dict[str, ShadowStat] = {}
    for n in g_lowp.nodes:
        if is_lowp(n, g_lowp):
            if n.name not in ref_nodes:
                raise KeyError(f"shadow alignment: reference graph has no node {n.name!r}")
            stats[n.name] = ShadowStat(n.name, n.kind)

    for batch in batches:
        env = feeds(g_lowp, batch)
        be = backend or REFERENCE
        with be.session():
            for node in g_lowp.nodes:
                ins = [env[t] for t in node.inputs]
                out = be.execute(node, ins, g_lowp)
                env[node.outputs[0]] = out
                st = stats.get(node.name)
                if st is None:
                    continue
                ref_node = ref_nodes[node.name]
                y = as_float(out).astype(np.float64)
                if node.kind in FC_KINDS:
                    x = _layer_input(node, env, prod)
                    twin_node = Node(ref_node.name, FC_RELU if node.kind == FC_RELU else "FullyConnected", ref_node.inputs, ref_node.outputs, ref_node.attrs, "fp32")
                    if ref_node.precision != "fp32":
                        raise ValueError(f"shadow alignment: reference node {node.name!r} is not fp32")
                    with tw.session():
                        r = tw.execute(twin_node, [x], g_ref)
                elif node.kind == SLS:
                    twin_node = Node(ref_node.name, SLS, ref_node.inputs, ref_node.outputs, ref_node.attrs, "fp32", None)
                    with tw.session():
                        r = tw.execute(twin_node, ins, g_ref)
                elif node.kind == BMM:
                    twin_node = Node(node.name, BMM, node.inputs, node.outputs, node.attrs, "fp32", None)
                    r = tw.execute(twin_node, [as_float(t) for t in ins], g_ref)
                else:
                    twin_node = Node(node.name, node.kind, node.inputs, node.outputs, {}, "fp32")
                    r = Backend().execute(twin_node, [as_float(t) for t in ins], g_ref)
                r = np.asarray(r, dtype=np.float64)
                st.sq_err += float(np.sum((y - r) ** 2))
                st.sq_ref += float(np.sum(r**2))
                st.count += y.shape[0]
                if keep:
                    st.lowp.append(y.astype(np.float32))
                    st.ref.append(r.astype(np.float32))
                    st.inputs.append([as_float(t) if not isinstance(t, tuple) else t for t in ins])
    return stats
