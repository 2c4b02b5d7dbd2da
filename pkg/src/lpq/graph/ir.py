"""Operator-level model IR."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..tables import EmbeddingTable

FC = "FullyConnected"
RELU = "Relu"
FC_RELU = "FCRelu"
SIGMOID = "Sigmoid"
SWISH = "Swish"
CONCAT = "Concat"
SLS = "SparseLengthsSum"
BMM = "BatchMatMul"
QUANTIZE = "Quantize"
DEQUANTIZE = "Dequantize"

OP_KINDS = (FC, RELU, FC_RELU, SIGMOID, SWISH, CONCAT, SLS, BMM, QUANTIZE, DEQUANTIZE)
FC_KINDS = (FC, FC_RELU)
PRECISIONS = ("fp32", "fp16", "int8")


@dataclass
class Node:
    name: str
    kind: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict = field(default_factory=dict)
    precision: str = "fp32"
    accum: str | None = None  # fp16-compute accumulator for FC/BMM; pooling accumulator for SLS

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "attrs": self.attrs,
            "precision": self.precision,
            "accum": self.accum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        return cls(d["name"], d["kind"], list(d["inputs"]), list(d["outputs"]), dict(d["attrs"]), d["precision"], d["accum"])

    def copy(self) -> "Node":
        return Node(self.name, self.kind, list(self.inputs), list(self.outputs), copy.deepcopy(self.attrs), self.precision, self.accum)


@dataclass
class ModelGraph:
    """Topologically ordered nodes plus the weight store and embedding tables.

    ``io`` names the graph inputs: ``dense`` (tensor name), ``dense_dim``,
    ``sparse`` (list of slot input names, one per table lookup) and
    ``output`` (the probability tensor).
    """

    nodes: list[Node]
    weights: dict[str, np.ndarray]
    tables: dict[str, EmbeddingTable]
    io: dict
    meta: dict = field(default_factory=dict)

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def has_node(self, name: str) -> bool:
        return any(n.name == name for n in self.nodes)

    def producers(self) -> dict[str, Node]:
        return {t: n for n in self.nodes for t in n.outputs}

    def consumers(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, []).append(n)
        return out

    def fc_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.kind in FC_KINDS]

    def last_fc(self) -> Node | None:
        fcs = self.fc_nodes()
        return fcs[-1] if fcs else None

    def graph_inputs(self) -> list[str]:
        return [self.io["dense"], *self.io["sparse"]]

    def copy(self) -> "ModelGraph":
        """New node list and containers; arrays are shared (they are never mutated)."""
        return ModelGraph([n.copy() for n in self.nodes], dict(self.weights), dict(self.tables), copy.deepcopy(self.io), copy.deepcopy(self.meta))

    def prune_weights(self) -> "ModelGraph":
        used = set()
        for n in self.nodes:
            for key in ("weight", "bias"):
                if n.attrs.get(key):
                    used.add(n.attrs[key])
        self.weights = {k: v for k, v in self.weights.items() if k in used}
        return self


# -- validation ----------------------------------------------------------------


def _toposort_ok(g: ModelGraph) -> bool:
    prod = g.producers()
    indeg = {}
    deps: dict[str, list[str]] = {}
    for n in g.nodes:
        srcs = {prod[t].name for t in n.inputs if t in prod}
        indeg[n.name] = len(srcs)
        for s in srcs:
            deps.setdefault(s, []).append(n.name)
    ready = [k for k, v in indeg.items() if v == 0]
    seen = 0
    while ready:
        k = ready.pop()
        seen += 1
        for d in deps.get(k, []):
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
    return seen == len(g.nodes)


def validate(g: ModelGraph) -> list[str]:
    """Structural, shape and precision-boundary checks. Returns violations (empty = valid)."""
    errs: list[str] = []
    names = [n.name for n in g.nodes]
    if len(set(names)) != len(names):
        errs.append("duplicate node names")

    prod: dict[str, str] = {}
    for n in g.nodes:
        if n.kind not in OP_KINDS:
            errs.append(f"{n.name}: unknown op kind {n.kind!r}")
        if n.precision not in PRECISIONS:
            errs.append(f"{n.name}: unknown precision {n.precision!r}")
        for t in n.outputs:
            if t in prod:
                errs.append(f"tensor {t!r} produced by both {prod[t]} and {n.name}")
            prod[t] = n.name

    if not _toposort_ok(g):
        errs.append("cycle: graph is not a DAG")
        return errs

    inputs = set(g.graph_inputs())
    dims: dict[str, int] = {g.io["dense"]: int(g.io["dense_dim"])}
    kinds: dict[str, str] = {g.io["dense"]: "fp"}  # "fp" / "int" / "sparse"
    for s in g.io["sparse"]:
        kinds[s] = "sparse"

    for n in g.nodes:
        missing = [t for t in n.inputs if t not in kinds]
        if missing:
            where = "not produced before use" if any(t in prod for t in missing) else "undefined"
            errs.append(f"{n.name}: input {missing[0]!r} {where}")
            for t in n.outputs:
                kinds[t], dims[t] = "fp", -1
            continue
        in_kinds = [kinds[t] for t in n.inputs]
        in_dims = [dims.get(t, -1) for t in n.inputs]
        out_kind, out_dim = "fp", -1

        if n.kind in FC_KINDS:
            w = g.weights.get(n.attrs.get("weight"))
            if w is None:
                errs.append(f"{n.name}: missing weight blob {n.attrs.get('weight')!r}")
            elif w.shape != (n.attrs["in_dim"], n.attrs["out_dim"]):
                errs.append(f"{n.name}: weight shape {w.shape} != ({n.attrs['in_dim']}, {n.attrs['out_dim']})")
            if n.attrs.get("bias") and n.attrs["bias"] not in g.weights:
                errs.append(f"{n.name}: missing bias blob {n.attrs['bias']!r}")
            if in_dims[0] not in (-1, n.attrs["in_dim"]):
                errs.append(f"{n.name}: input dim {in_dims[0]} != in_dim {n.attrs['in_dim']}")
            if n.precision == "int8":
                if in_kinds[0] != "int":
                    errs.append(f"{n.name}: boundary violation, int8 FC fed {in_kinds[0]} tensor {n.inputs[0]!r} without Quantize")
                out_kind = "int" if n.attrs.get("out_qparams") else "fp"
            elif in_kinds[0] != "fp":
                errs.append(f"{n.name}: boundary violation, {n.precision} FC fed {in_kinds[0]} tensor {n.inputs[0]!r} without Dequantize")
            out_dim = n.attrs["out_dim"]
        elif n.kind == SLS:
            tab = g.tables.get(n.attrs.get("table"))
            if tab is None:
                errs.append(f"{n.name}: missing table {n.attrs.get('table')!r}")
            else:
                out_dim = tab.dim
            if in_kinds[0] != "sparse":
                errs.append(f"{n.name}: SparseLengthsSum needs a sparse input")
        elif n.kind == QUANTIZE:
            if n.attrs.get("requant"):
                if in_kinds[0] != "int":
                    errs.append(f"{n.name}: requantize fed a non-integer tensor")
            elif in_kinds[0] != "fp":
                errs.append(f"{n.name}: Quantize fed a non-float tensor")
            out_kind, out_dim = "int", in_dims[0]
        elif n.kind == DEQUANTIZE:
            if in_kinds[0] != "int":
                errs.append(f"{n.name}: Dequantize fed a non-integer tensor")
            out_dim = in_dims[0]
        else:
            bad = [t for t, k in zip(n.inputs, in_kinds) if k != "fp"]
            if bad:
                errs.append(f"{n.name}: boundary violation, {n.kind} fed {kinds[bad[0]]} tensor {bad[0]!r} without Dequantize")
            if n.kind == CONCAT:
                out_dim = -1 if -1 in in_dims else sum(in_dims)
            elif n.kind == BMM:
                f = len(n.inputs)
                if len({d for d in in_dims}) > 1:
                    errs.append(f"{n.name}: BatchMatMul interaction inputs differ in width {in_dims}")
                out_dim = f * (f - 1) // 2
            else:
                out_dim = in_dims[0]
        for t in n.outputs:
            kinds[t], dims[t] = out_kind, out_dim

    out = g.io.get("output")
    if out not in kinds:
        errs.append(f"graph output {out!r} is never produced")
    else:
        if dims.get(out) not in (-1, 1):
            errs.append(f"graph output {out!r} has width {dims[out]}, expected 1")
        last = next((n for n in g.nodes if out in n.outputs), None)
        if last is not None and last.kind != SIGMOID:
            errs.append(f"graph output {out!r} is not produced by a Sigmoid")
    unused = [t for t in inputs if t not in {i for n in g.nodes for i in n.inputs}]
    if unused:
        errs.append(f"graph inputs never consumed: {sorted(unused)}")
    return errs
