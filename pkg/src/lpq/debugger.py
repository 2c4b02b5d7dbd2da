"""Numeric debugger: shrink the problem, rank samples, localize operators, compare backends."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .graph import serialize
from .graph.execute import REFERENCE, Backend, as_float, feeds, run, shadow_execute
from .graph.ir import FC_KINDS, SLS, ModelGraph
from .kernels import QTensor
from .metrics import cross_entropy, two_diff

DEFAULT_BUNDLE_SIZE = 256
TOP_OPS = 10
TOP_SAMPLES = 20
SKIP_ERROR = 0.1  # relative L2 above which skipping is suggested outright
HIGH_ERROR = 0.02


class BundleEquivalenceError(AssertionError):
    pass


# -- bundles -----------------------------------------------------------------


def _table_slots(g: ModelGraph) -> dict[str, list[int]]:
    """table name -> sparse slot indices that read it."""
    slot_of = {name: i for i, name in enumerate(g.io["sparse"])}
    out: dict[str, list[int]] = {}
    for n in g.nodes:
        if n.kind == SLS:
            out.setdefault(n.attrs["table"], []).append(slot_of[n.inputs[0]])
    return out


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass
class DebugBundle:
    data: Dataset  # remapped ids
    source_index: np.ndarray  # positions in the source dataset
    remap: dict[str, np.ndarray]  # table -> original row id of each kept row
    provenance: dict
    model: ModelGraph | None = None  # shrunken primary model

    def shrink(self, g: ModelGraph) -> ModelGraph:
        """Any graph over the same tables, reduced to the bundle's rows."""
        out = g.copy()
        for name, rows in self.remap.items():
            out.tables[name] = g.tables[name].take(rows)
        return out

    def save(self, path) -> Path:
        p = Path(path)
        p.mkdir(parents=True, exist_ok=True)
        self.data.save(p / "data.jsonl")
        if self.model is not None:
            serialize.save(self.model, p / "model")
        doc = {
            "provenance": self.provenance,
            "source_index": self.source_index.tolist(),
            "remap": {k: v.tolist() for k, v in sorted(self.remap.items())},
        }
        (p / "remap.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
        return p

    @classmethod
    def load(cls, path) -> "DebugBundle":
        p = Path(path)
        doc = json.loads((p / "remap.json").read_text())
        model = serialize.load(p / "model") if (p / "model").exists() else None
        return cls(
            Dataset.load(p / "data.jsonl"),
            np.asarray(doc["source_index"], dtype=np.int64),
            {k: np.asarray(v, dtype=np.int64) for k, v in doc["remap"].items()},
            doc["provenance"],
            model,
        )


def extract_bundle(model: ModelGraph, dataset: Dataset, n: int = DEFAULT_BUNDLE_SIZE, seed: int = 0, also=()) -> DebugBundle:
    """Seeded sample of ``n`` records with tables cut down to the rows they touch.

    Predictions of ``model`` (and of every graph in ``also``) on the bundle are
    checked to be bitwise identical to the originals before returning.
    """
    if n > len(dataset):
        raise ValueError(f"bundle of {n} requested from {len(dataset)} samples")
    rng = np.random.default_rng([seed, 13])
    idx = np.sort(rng.choice(len(dataset), n, replace=False))
    sub = dataset.take(idx)
    ids = list(sub.ids)
    remap = {}
    for table, slots in sorted(_table_slots(model).items()):
        rows = np.unique(np.concatenate([sub.ids[s] for s in slots]))
        remap[table] = rows
        for s in slots:
            ids[s] = np.searchsorted(rows, sub.ids[s]).astype(np.int64)
    data = Dataset(sub.dense, sub.offsets, ids, sub.labels, sub.weights)
    bundle = DebugBundle(
        data,
        idx,
        remap,
        {"source_digest": dataset.digest(), "seed": seed, "n": n, "model": serialize.fingerprint(model)[:16]},
    )
    bundle.model = bundle.shrink(model)
    for g in (model, *also):
        before = run(g, sub)
        after = run(bundle.shrink(g) if g is not model else bundle.model, data)
        if not _bits_equal(before, after):
            raise BundleEquivalenceError("shrunken model does not reproduce the original predictions bitwise")
    return bundle


# -- sample ranking ----------------------------------------------------------


@dataclass(frozen=True)
class SampleDelta:
    index: int  # position in the bundle
    source_index: int
    ce_lowp: float
    ce_fp32: float
    delta: float
    delta_lo: float  # rounding residue: ce_lowp - ce_fp32 = delta + delta_lo exactly


def rank_samples(bundle: DebugBundle, g_lowp: ModelGraph, g_fp32: ModelGraph) -> list[SampleDelta]:
    """Per-sample CE increase of the low-precision model, largest first (stable)."""
    d = bundle.data
    p_l = run(bundle.shrink(g_lowp), d)
    p_f = run(bundle.shrink(g_fp32), d)
    ce_l = cross_entropy(p_l, d.labels, d.weights)
    ce_f = cross_entropy(p_f, d.labels, d.weights)
    hi, lo = two_diff(ce_l, ce_f)
    order = np.argsort(-hi, kind="stable")
    return [SampleDelta(int(i), int(bundle.source_index[i]), float(ce_l[i]), float(ce_f[i]), float(hi[i]), float(lo[i])) for i in order]


# -- shadow run --------------------------------------------------------------


def summarize(x, bins: int = 16) -> dict:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        return {"count": 0}
    counts, edges = np.histogram(x, bins=bins)
    p1, p99 = np.percentile(x, [1, 99])
    return {
        "count": int(x.size),
        "min": float(x.min()),
        "max": float(x.max()),
        "mean": float(x.mean()),
        "std": float(x.std()),
        "p1": float(p1),
        "p99": float(p99),
        "hist": {"counts": counts.tolist(), "edges": edges.tolist()},
    }


@dataclass
class OpErrorRecord:
    node: str
    kind: str
    rel_l2: float
    input_stats: dict = field(default_factory=dict)
    output_stats: dict = field(default_factory=dict)
    weight_stats: dict = field(default_factory=dict)
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "kind": self.kind,
            "rel_l2": self.rel_l2,
            "input_stats": self.input_stats,
            "output_stats": self.output_stats,
            "weight_stats": self.weight_stats,
            "per_sample": self.per_sample,
        }


def _weights_of(g_ref: ModelGraph, name: str):
    n = g_ref.node(name)
    if n.kind in FC_KINDS:
        return g_ref.weights[n.attrs["weight"]]
    if n.kind == SLS:
        return g_ref.tables[n.attrs["table"]].dequantized()
    return None


def shadow_run(bundle: DebugBundle, g_lowp: ModelGraph, g_fp32: ModelGraph, samples=None, backend: Backend | None = None) -> list[OpErrorRecord]:
    """Per-node relative L2 error of each low-precision node against its fp32 twin, worst first.

    Errors aggregate over the bundle batch; ``per_sample`` holds the per-row
    breakdown. ``samples`` optionally restricts to bundle positions.
    """
    data = bundle.data if samples is None else bundle.data.take(np.asarray(samples))
    gl, gf = bundle.shrink(g_lowp), bundle.shrink(g_fp32)
    stats = shadow_execute(gl, gf, [data], backend=backend, keep=True)
    recs = []
    for name, st in stats.items():
        y = np.concatenate(st.lowp).astype(np.float64)
        r = np.concatenate(st.ref).astype(np.float64)
        per = np.sqrt(((y - r) ** 2).reshape(len(y), -1).sum(1)) / (np.sqrt((r**2).reshape(len(r), -1).sum(1)) + 1e-12)
        first = st.inputs[0][0] if st.inputs and st.inputs[0] else None
        ins = first if first is not None and not isinstance(first, tuple) else None
        w = _weights_of(gf, name)
        recs.append(
            OpErrorRecord(
                name,
                st.kind,
                st.rel_l2,
                summarize(ins) if ins is not None else {},
                summarize(y),
                summarize(w) if w is not None else {},
                per.tolist(),
            )
        )
    recs.sort(key=lambda r: (-r.rel_l2, r.node))
    return recs


def inject_scale_fault(g: ModelGraph, node: str, factor: float = 4.0) -> ModelGraph:
    """Copy of a quantized graph with one int8 FC's weight scales multiplied by ``factor``."""
    out = g.copy()
    n = out.node(node)
    if n.precision != "int8":
        raise ValueError(f"{node} is not an int8 layer")
    n.attrs["w_scales"] = [float(s) * factor for s in n.attrs["w_scales"]]
    return out


# -- backend comparison ------------------------------------------------------


def _same(a, b) -> bool:
    if isinstance(a, QTensor) or isinstance(b, QTensor):
        return (
            isinstance(a, QTensor)
            and isinstance(b, QTensor)
            and a.params == b.params
            and _bits_equal(a.q, b.q)
        )
    return _bits_equal(np.asarray(a), np.asarray(b))


def _dump(t) -> dict:
    if isinstance(t, tuple):
        return {"offsets": t[0].tolist(), "ids": t[1].tolist()}
    if isinstance(t, QTensor):
        return {"q": t.q.tolist(), "params": t.params.to_dict()}
    a = np.asarray(t)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "values": a.tolist(), "bits": a.view(np.uint8).tobytes().hex() if a.size <= 256 else None}


@dataclass
class BackendDiff:
    backend_a: str
    backend_b: str
    nodes: list[dict]  # per node: name, equal, local_equal, max_abs
    output_equal: bool
    first_divergence: str | None
    local_first_divergence: str | None
    operands: dict | None

    @property
    def num_diffs(self) -> int:
        return sum(not n["equal"] for n in self.nodes)

    def to_dict(self) -> dict:
        return {
            "backend_a": self.backend_a,
            "backend_b": self.backend_b,
            "nodes": self.nodes,
            "output_equal": self.output_equal,
            "first_divergence": self.first_divergence,
            "local_first_divergence": self.local_first_divergence,
            "operands": self.operands,
        }


def compare_backends(g: ModelGraph, impl_a: Backend, impl_b: Backend, batch: Dataset, max_dump_rows: int = 4) -> BackendDiff:
    """Bitwise per-node and end-to-end comparison of two backends.

    Each backend runs the whole graph on its own. In addition every node of
    backend B is re-run on backend A's inputs, which pins the divergence on
    the operator that introduces it rather than on its consumers.
    """
    impl_a = impl_a or REFERENCE
    impl_b = impl_b or REFERENCE
    env_a = feeds(g, batch)
    env_b = feeds(g, batch)
    nodes, first, local_first, operands = [], None, None, None
    with impl_a.session():
        outs_a = {}
        for node in g.nodes:
            ins = [env_a[t] for t in node.inputs]
            env_a[node.outputs[0]] = outs_a[node.name] = impl_a.execute(node, ins, g)
    with impl_b.session():
        for node in g.nodes:
            ins_b = [env_b[t] for t in node.inputs]
            out_b = impl_b.execute(node, ins_b, g)
            env_b[node.outputs[0]] = out_b
            ins_a = [env_a[t] for t in node.inputs]
            local_b = impl_b.execute(node, ins_a, g)
            out_a = outs_a[node.name]
            eq = _same(out_a, out_b)
            local_eq = _same(out_a, local_b)
            fa, fb = as_float(out_a).astype(np.float64), as_float(out_b).astype(np.float64)
            max_abs = float(np.abs(fa - fb).max(initial=0.0)) if fa.shape == fb.shape else float("inf")
            nodes.append({"node": node.name, "kind": node.kind, "equal": eq, "local_equal": local_eq, "max_abs": max_abs})
            if not eq and first is None:
                first = node.name
            if not local_eq and local_first is None:
                local_first = node.name
                rows = slice(0, max_dump_rows)
                operands = {
                    "node": node.name,
                    "inputs": [_dump(t if isinstance(t, tuple) else _rows(t, rows)) for t in ins_a],
                    "output_a": _dump(_rows(out_a, rows)),
                    "output_b": _dump(_rows(local_b, rows)),
                }
    out = g.io["output"]
    return BackendDiff(impl_a.name, impl_b.name, nodes, _same(env_a[out], env_b[out]), first, local_first, operands)


def _rows(t, rows: slice):
    if isinstance(t, QTensor):
        return QTensor(t.q[rows], t.params, t.rng)
    return np.asarray(t)[rows]


# -- reports -----------------------------------------------------------------


def suggest(rec: OpErrorRecord | dict) -> list[str]:
    """Next actions for one operator, following the escalation ladder."""
    r = rec.to_dict() if isinstance(rec, OpErrorRecord) else rec
    err, kind = r["rel_l2"], r["kind"]
    out = []
    if kind not in FC_KINDS:
        if err > HIGH_ERROR:
            out.append("keep this operator in higher precision")
        return out
    if err > SKIP_ERROR:
        out.append("skip")
    if err > HIGH_ERROR:
        w = r.get("weight_stats") or {}
        if w.get("count") and max(abs(w["max"]), abs(w["min"])) > 8 * max(abs(w["p99"]), abs(w["p1"]), 1e-30):
            out.append("per_channel_weights (weight outliers)")
        else:
            out.append("per_channel_weights")
        x = r.get("input_stats") or {}
        if x.get("count") and max(abs(x["max"]), abs(x["min"])) > 4 * max(abs(x["p99"]), abs(x["p1"]), 1e-30):
            out.append("percentile_acts (wide activation range)")
        else:
            out.append("percentile_acts")
        out.append("l2min_acts")
        if "skip" not in out:
            out.append("skip")
    return out


def report(records: list[OpErrorRecord], samples: list[SampleDelta], fmt: str = "text", top_ops: int = TOP_OPS, top_samples: int = TOP_SAMPLES):
    ops = [r.to_dict() for r in records[:top_ops]]
    for o in ops:
        o["suggestions"] = suggest(o)
        o.pop("per_sample", None)
    smp = [s.__dict__.copy() for s in samples[:top_samples]]
    doc = {
        "version": 1,
        "top_ops": ops,
        "top_samples": smp,
        "suggestions": ops[0]["suggestions"] if ops else [],
    }
    if fmt == "structured":
        return json.dumps(doc, sort_keys=True, indent=1)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = ["operators by shadow error"]
    if not ops:
        lines.append("  (none)")
    for o in ops:
        w = o["weight_stats"]
        wtxt = f" w[{w['min']:.3g}, {w['max']:.3g}] p99 {w['p99']:.3g}" if w.get("count") else ""
        x = o["input_stats"]
        xtxt = f" in[{x['min']:.3g}, {x['max']:.3g}] p99 {x['p99']:.3g}" if x.get("count") else ""
        lines.append(f"  {o['node']:<16} {o['kind']:<16} rel_l2 {o['rel_l2']:.4g}{wtxt}{xtxt}")
        if o["suggestions"]:
            lines.append(f"    try: {', '.join(o['suggestions'])}")
    lines.append("samples by cross-entropy increase")
    if not smp:
        lines.append("  (none)")
    for s in smp:
        lines.append(f"  #{s['source_index']:<8} delta {s['delta']:+.4g} (lowp {s['ce_lowp']:.4g}, fp32 {s['ce_fp32']:.4g})")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    return json.loads(text)
