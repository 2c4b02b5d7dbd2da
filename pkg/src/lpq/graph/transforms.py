"""Graph transforms. Every transform returns a new graph and leaves its input untouched."""

from __future__ import annotations

import numpy as np

from ..calib import Histogram, collect, derive_range
from ..numerics import KERNEL_POLICY, to_half
from ..quant import INT8, UINT8, compute_qparams, quantize_weight
from ..scheme import QuantScheme
from ..tables import quantize_table
from .execute import as_float, trace
from .ir import DEQUANTIZE, FC, FC_KINDS, FC_RELU, QUANTIZE, RELU, ModelGraph, Node, validate


class MissingCalibrationError(KeyError):
    pass


class GraphValidationError(ValueError):
    pass


def _rename_input(nodes: list[Node], old: str, new: str) -> None:
    for n in nodes:
        n.inputs = [new if t == old else t for t in n.inputs]


def fuse_fc_relu(g: ModelGraph) -> ModelGraph:
    """Fold each FC whose only consumer is a Relu into one FCRelu node.

    The fused node keeps the FC's name and takes over the Relu's output tensor.
    """
    out = g.copy()
    cons = out.consumers()
    graph_out = out.io["output"]
    drop = set()
    nodes = []
    for n in out.nodes:
        if n.name in drop:
            continue
        if n.kind == FC:
            users = cons.get(n.outputs[0], [])
            if len(users) == 1 and users[0].kind == RELU and n.outputs[0] != graph_out:
                r = users[0]
                n.kind = FC_RELU
                n.outputs = list(r.outputs)
                drop.add(r.name)
        nodes.append(n)
    out.nodes = nodes
    return out


def elide_dq_q(g: ModelGraph) -> ModelGraph:
    """Remove Dequantize->Quantize pairs; fold differing params into a requantizing Quantize."""
    out = g.copy()
    prod = out.producers()
    cons = out.consumers()
    removed = set()
    for q in out.nodes:
        if q.kind != QUANTIZE or q.attrs.get("dynamic") or q.attrs.get("requant"):
            continue
        dq = prod.get(q.inputs[0])
        if dq is None or dq.kind != DEQUANTIZE or dq.name in removed:
            continue
        if [c.name for c in cons.get(dq.outputs[0], [])] != [q.name] or dq.outputs[0] == out.io["output"]:
            continue
        src = dq.inputs[0]
        removed.add(dq.name)
        if dq.attrs.get("qparams") == q.attrs.get("qparams") and dq.attrs.get("range") == q.attrs.get("range"):
            removed.add(q.name)
            _rename_input(out.nodes, q.outputs[0], src)
        else:
            q.inputs = [src]
            q.attrs["requant"] = True
    out.nodes = [n for n in out.nodes if n.name not in removed]
    return out


def _fp16_node(n: Node, g: ModelGraph, accum: str | None = "fp32") -> Node:
    """Switch an FC to fp16 weight storage (weights converted in the graph's store)."""
    m = n.copy()
    src = n.attrs["weight"]
    key = f"{src}@fp16"
    if key not in g.weights:
        g.weights[key] = to_half(g.weights[src], KERNEL_POLICY)
    m.attrs["weight"] = key
    m.precision = "fp16"
    m.accum = accum
    return m


def to_fp16(g: ModelGraph, accum: str | None = "fp32") -> ModelGraph:
    out = g.copy()
    out.nodes = [_fp16_node(n, out, accum) if n.kind in FC_KINDS and n.precision == "fp32" else n for n in out.nodes]
    return out.prune_weights()


def quantize_tables(g: ModelGraph, mode="int8") -> ModelGraph:
    """Rowwise-quantize embedding tables.

    ``mode``: "fp32", "int8", "int4", "mixed" (the larger half of the tables
    by fp32 size in int4, the rest int8) or a {table: bits} dict.
    """
    out = g.copy()
    names = sorted(out.tables)
    if isinstance(mode, dict):
        bits = {n: int(mode.get(n, 32)) for n in names}
    elif mode == "fp32":
        bits = {n: 32 for n in names}
    elif mode in ("int8", "int4"):
        b = 8 if mode == "int8" else 4
        bits = {n: b for n in names}
    elif mode == "mixed":
        by_size = sorted(names, key=lambda n: (-out.tables[n].rows * out.tables[n].dim, n))
        top = set(by_size[: len(by_size) // 2])
        bits = {n: 4 if n in top else 8 for n in names}
    else:
        raise ValueError(f"unknown table quantization mode {mode!r}")
    for n in names:
        t = out.tables[n]
        if bits[n] != t.bits:
            out.tables[n] = quantize_table(t, bits[n])
    return out


def calibrate(g: ModelGraph, data, batch_size: int = 1024, hists: dict[str, Histogram] | None = None) -> dict[str, Histogram]:
    """Histograms of every float activation the graph produces (plus the dense input)."""
    hists = {} if hists is None else hists
    for batch in data.batches(batch_size):
        env = trace(g, batch)
        floats = {}
        for name, v in env.items():
            if isinstance(v, tuple):
                continue
            floats[name] = as_float(v)
        collect(floats, hists)
    return hists


def _act_params(hists: dict[str, Histogram], tensor: str, method, node: str):
    h = hists.get(tensor)
    if h is None or h.total == 0:
        raise MissingCalibrationError(f"no calibration histogram for activation {tensor!r} (needed by {node})")
    lo, hi = derive_range(h, method, UINT8)
    return compute_qparams(lo, hi, UINT8)


def _quantize_fc(n: Node, g: ModelGraph, cfg, hists) -> list[Node]:
    w = g.weights[n.attrs["weight"]]
    wq = quantize_weight(w, cfg.granularity, cfg.weight_range, cfg.symmetric)
    key = f"{n.attrs['weight']}@int8"
    g.weights[key] = wq.codes.astype(np.int8 if wq.rng == INT8 else np.uint8)
    x, y = n.inputs[0], n.outputs[0]
    qn = Node(f"{n.name}/quantize", QUANTIZE, [x], [f"{n.name}/in_q"], {"range": UINT8.to_dict()}, "int8")
    if cfg.dynamic:
        qn.attrs.update(dynamic=True, qparams=None)
    else:
        qn.attrs.update(dynamic=False, qparams=_act_params(hists, x, cfg.act_in, n.name).to_dict())
    fc = n.copy()
    fc.inputs = [qn.outputs[0]]
    fc.precision = "int8"
    fc.accum = None
    fc.attrs.update(
        weight=key,
        w_scales=[float(s) for s in wq.scales],
        w_zeropts=[int(z) for z in wq.zeropts],
        w_range=wq.rng.to_dict(),
        out_range=UINT8.to_dict(),
    )
    if cfg.dynamic:
        fc.attrs["out_qparams"] = None
        return [qn, fc]
    op = _act_params(hists, y, cfg.act_out, n.name)
    fc.attrs["out_qparams"] = op.to_dict()
    fc.outputs = [f"{n.name}/out_q"]
    dq = Node(f"{n.name}/dequantize", DEQUANTIZE, [fc.outputs[0]], [y], {"qparams": op.to_dict(), "range": UINT8.to_dict()}, "int8")
    return [qn, fc, dq]


def apply_scheme(g: ModelGraph, scheme: QuantScheme, hists: dict[str, Histogram] | None) -> ModelGraph:
    """Quantize the FC layers of a float graph per ``scheme``.

    Quantized FCs become Quantize -> int8 FC (requantizing output) ->
    Dequantize, after which adjacent Dequantize/Quantize pairs are elided.
    Skipped layers fall back to fp16 weights (or stay fp32).
    """
    hists = hists or {}
    base = fuse_fc_relu(g)
    scheme.check_nodes([n.name for n in base.fc_nodes()])
    last = base.last_fc()
    glob = scheme.global_
    nodes: list[Node] = []
    for n in base.nodes:
        if n.kind not in FC_KINDS or n.precision != "fp32":
            nodes.append(n)
            continue
        cfg = scheme.layer_config(n.name)
        if cfg.skip or (glob.skip_last_fc and n is last):
            nodes.append(_fp16_node(n, base) if glob.fallback_precision == "fp16" else n)
            continue
        nodes.extend(_quantize_fc(n, base, cfg, hists))
    base.nodes = nodes
    out = elide_dq_q(base).prune_weights()
    out.meta = dict(out.meta, scheme=scheme.to_dict())
    errs = validate(out)
    if errs:
        raise GraphValidationError("; ".join(errs))
    return out


def skipped_fc_names(g: ModelGraph) -> list[str]:
    """FC layers of a transformed graph that are not int8."""
    return [n.name for n in g.fc_nodes() if n.precision != "int8"]
