"""Seeded synthetic DLRM-style models, datasets and snapshot sequences."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .graph import serialize
from .graph.ir import BMM, CONCAT, FC, RELU, SIGMOID, SLS, ModelGraph, Node, validate
from .graph.reference import predict64, run64
from .tables import EmbeddingTable

FAULT_KINDS = ("outlier-weights", "wide-dynamic-range")
DRIFT_KINDS = ("none", "weight-walk", "activation-shift")


def geometric_rows(num_tables: int, largest: int = 40000) -> list[int]:
    """Table sizes halving from ``largest``; 8 tables give a mean near 10^4 rows."""
    return [max(1, largest >> i) for i in range(num_tables)]


@dataclass(frozen=True)
class Fault:
    layer: str
    kind: str
    magnitude: float = 50.0  # outlier-weights: outlier value
    count: int | None = None  # outlier-weights: number of outliers (default: one per output column)
    multiplier: float = 64.0  # wide-dynamic-range: channel gain
    channels: int = 2  # wide-dynamic-range: number of amplified output channels

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")


@dataclass(frozen=True)
class ModelGenConfig:
    num_tables: int = 8
    table_rows: tuple[int, ...] | None = None
    emb_dim: int = 32
    dense_dim: int = 16
    bottom: tuple[int, ...] = (64, 32)
    top: tuple[int, ...] = (512, 256, 1)
    interaction: str = "concat"
    emb_sigma: float = 0.3  # std of embedding entries
    emb_init: str = "normal"  # normal / uniform (same std)
    init_gain: float = 2.0  # weight sigma = sqrt(gain / fan_in)
    logit_mean: float = -1.0
    logit_std: float = 0.6
    faults: tuple[Fault, ...] = ()
    seed: int = 0

    def rows(self) -> list[int]:
        return list(self.table_rows) if self.table_rows is not None else geometric_rows(self.num_tables)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["table_rows"] = self.rows()
        d["bottom"], d["top"] = list(self.bottom), list(self.top)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGenConfig":
        d = dict(d)
        faults = tuple(Fault(**f) for f in d.pop("faults", []))
        for k in ("table_rows", "bottom", "top"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(faults=faults, **d)


@dataclass(frozen=True)
class DataGenConfig:
    n: int = 10000
    zipf_s: float = 1.2
    mean_extra_ids: float = 2.0  # lookups per slot = 1 + Poisson(mean_extra_ids)
    max_ids: int = 16
    dense_shift: float = 0.0
    dense_dist: str = "normal"  # normal / uniform, both unit variance
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataGenConfig":
        return cls(**d)


class ConfigError(ValueError):
    pass


# -- model -------------------------------------------------------------------


def _fc(name: str, x: str, out: str, n: int, k: int) -> Node:
    return Node(name, FC, [x], [out], {"weight": f"{name}.weight", "bias": f"{name}.bias", "in_dim": n, "out_dim": k})


def _check(cfg: ModelGenConfig) -> None:
    if len(cfg.rows()) != cfg.num_tables:
        raise ConfigError(f"{len(cfg.rows())} table sizes for {cfg.num_tables} tables")
    if not cfg.bottom or not cfg.top or cfg.top[-1] != 1:
        raise ConfigError("bottom MLP must be nonempty and the top MLP must end in width 1")
    if cfg.emb_init not in ("normal", "uniform"):
        raise ConfigError(f"unknown embedding init {cfg.emb_init!r}")
    if cfg.interaction not in ("concat", "dot"):
        raise ConfigError(f"unknown interaction {cfg.interaction!r}")
    if cfg.interaction == "dot" and cfg.bottom[-1] != cfg.emb_dim:
        raise ConfigError(f"dot interaction needs bottom output width {cfg.bottom[-1]} == embedding dim {cfg.emb_dim}")


def build_topology(cfg: ModelGenConfig) -> tuple[list[Node], dict]:
    _check(cfg)
    nodes: list[Node] = []
    x, width = "dense", cfg.dense_dim
    for j, k in enumerate(cfg.bottom):
        name = f"bot_fc{j}"
        nodes.append(_fc(name, x, f"{name}_out", width, k))
        nodes.append(Node(f"bot_relu{j}", RELU, [f"{name}_out"], [f"{name}_act"]))
        x, width = f"{name}_act", k
    bot = x
    pooled = []
    sparse = []
    for i in range(cfg.num_tables):
        sparse.append(f"sparse_{i}")
        nodes.append(Node(f"sls_{i}", SLS, [f"sparse_{i}"], [f"pooled_{i}"], {"table": f"emb_{i}"}))
        pooled.append(f"pooled_{i}")
    if cfg.interaction == "concat":
        nodes.append(Node("interact", CONCAT, [bot, *pooled], ["interaction"]))
        width = cfg.bottom[-1] + cfg.num_tables * cfg.emb_dim
    else:
        f = cfg.num_tables + 1
        nodes.append(Node("interact_dot", BMM, [bot, *pooled], ["pairs"], {"mode": "pairwise_dot", "dim": cfg.emb_dim}))
        nodes.append(Node("interact", CONCAT, [bot, "pairs"], ["interaction"]))
        width = cfg.bottom[-1] + f * (f - 1) // 2
    x = "interaction"
    for j, k in enumerate(cfg.top):
        name = f"top_fc{j}"
        nodes.append(_fc(name, x, f"{name}_out", width, k))
        if j < len(cfg.top) - 1:
            nodes.append(Node(f"top_relu{j}", RELU, [f"{name}_out"], [f"{name}_act"]))
            x = f"{name}_act"
        width = k
    nodes.append(Node("prob_sigmoid", SIGMOID, [f"top_fc{len(cfg.top) - 1}_out"], ["prob"]))
    io = {"dense": "dense", "dense_dim": cfg.dense_dim, "sparse": sparse, "output": "prob"}
    return nodes, io


def _init_weight(rng: np.random.Generator, n: int, k: int, gain: float) -> np.ndarray:
    sigma = np.sqrt(gain / n)
    return np.clip(rng.standard_normal((n, k)) * sigma, -6 * sigma, 6 * sigma).astype(np.float32)


def _apply_fault(g: ModelGraph, f: Fault, rng: np.random.Generator) -> None:
    if not g.has_node(f.layer) or g.node(f.layer).kind != FC:
        raise ConfigError(f"fault target {f.layer!r} is not an FC layer")
    node = g.node(f.layer)
    w = g.weights[node.attrs["weight"]].copy()
    n, k = w.shape
    prod = g.producers()
    cons = g.consumers()
    if f.kind == "outlier-weights":
        # outliers ride on one input unit; when that unit is an upstream ReLU
        # output it is switched off, so the float function is unchanged and the
        # fault only stretches this layer's weight range
        r = int(rng.integers(n))
        count = k if f.count is None else int(f.count)
        cols = rng.choice(k, size=min(count, k), replace=False)
        w[r, cols] = f.magnitude
        relu = prod.get(node.inputs[0])
        if relu is not None and relu.kind == RELU:
            up = prod[relu.inputs[0]]
            if up.kind == FC:
                uw = g.weights[up.attrs["weight"]].copy()
                ub = g.weights[up.attrs["bias"]].copy()
                uw[:, r] = 0.0
                ub[r] = -1.0
                g.weights[up.attrs["weight"]] = uw
                g.weights[up.attrs["bias"]] = ub
    else:
        # amplify a few output channels; the next FC compensates (ReLU is
        # positively homogeneous) so the float function is unchanged
        chans = rng.choice(k, size=min(f.channels, k), replace=False)
        w[:, chans] *= f.multiplier
        b = g.weights[node.attrs["bias"]].copy()
        b[chans] *= f.multiplier
        g.weights[node.attrs["bias"]] = b
        nxt = cons.get(node.outputs[0], [])
        if len(nxt) == 1 and nxt[0].kind == RELU:
            nxt = cons.get(nxt[0].outputs[0], [])
        if len(nxt) == 1 and nxt[0].kind == FC:
            nw = g.weights[nxt[0].attrs["weight"]].copy()
            nw[chans, :] /= f.multiplier
            g.weights[nxt[0].attrs["weight"]] = nw
    g.weights[node.attrs["weight"]] = w


def gen_model(cfg: ModelGenConfig = ModelGenConfig()) -> ModelGraph:
    """A validated fp32 model; a pure function of ``cfg``."""
    nodes, io = build_topology(cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    weights: dict[str, np.ndarray] = {}
    for n in nodes:
        if n.kind == FC:
            weights[n.attrs["weight"]] = _init_weight(rng, n.attrs["in_dim"], n.attrs["out_dim"], cfg.init_gain)
            weights[n.attrs["bias"]] = (rng.standard_normal(n.attrs["out_dim"]) * 0.01).astype(np.float32)
    tables = {}
    for i, rows in enumerate(cfg.rows()):
        if cfg.emb_init == "uniform":
            data = rng.uniform(-1.0, 1.0, (rows, cfg.emb_dim)) * (cfg.emb_sigma * np.sqrt(3.0))
        else:
            data = rng.standard_normal((rows, cfg.emb_dim)) * cfg.emb_sigma
        data = data.astype(np.float32)
        tables[f"emb_{i}"] = EmbeddingTable(f"emb_{i}", 32, cfg.emb_dim, data)
    g = ModelGraph(nodes, weights, tables, io, {"generator": cfg.to_dict()})
    frng = np.random.default_rng([cfg.seed, 1])
    for f in cfg.faults:
        _apply_fault(g, f, frng)
    _calibrate_logits(g, cfg)
    errs = validate(g)
    if errs:
        raise ConfigError("; ".join(errs))
    return g


def _logits64(g: ModelGraph, data: Dataset) -> np.ndarray:
    p = run64(g, data)
    p = np.clip(p, 1e-300, 1 - 1e-16)
    return np.log(p) - np.log1p(-p)


def _calibrate_logits(g: ModelGraph, cfg: ModelGenConfig) -> None:
    """Rescale the last FC so logits on a probe batch have the configured mean and spread."""
    last = g.last_fc()
    probe = sample_features(g, DataGenConfig(n=2048, seed=cfg.seed + 7919))
    wk, bk = last.attrs["weight"], last.attrs["bias"]
    g.weights[bk] = np.zeros_like(g.weights[bk])
    z = _logits64(g, probe)
    sd = float(z.std())
    a = cfg.logit_std / sd if sd > 0 else 1.0
    g.weights[wk] = (g.weights[wk].astype(np.float64) * a).astype(np.float32)
    g.weights[bk] = np.full(g.weights[bk].shape, cfg.logit_mean - a * z.mean(), dtype=np.float32)


# -- data --------------------------------------------------------------------


def zipf_probs(rows: int, s: float) -> np.ndarray:
    p = np.arange(1, rows + 1, dtype=np.float64) ** -s
    return p / p.sum()


def sample_features(g: ModelGraph, cfg: DataGenConfig) -> Dataset:
    rng = np.random.default_rng([cfg.seed, 2])
    shape = (cfg.n, g.io["dense_dim"])
    if cfg.dense_dist == "uniform":
        dense = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), shape) + cfg.dense_shift
    else:
        dense = rng.standard_normal(shape) + cfg.dense_shift
    sls = {n.inputs[0]: g.tables[n.attrs["table"]] for n in g.nodes if n.kind == SLS}
    offs, ids = [], []
    for slot in g.io["sparse"]:
        tab = sls[slot]
        # fixed per-table popularity order so hot rows are not simply the low ids
        perm = np.random.default_rng([cfg.seed, 3, tab.rows]).permutation(tab.rows)
        cdf = np.cumsum(zipf_probs(tab.rows, cfg.zipf_s))
        lengths = np.minimum(1 + rng.poisson(cfg.mean_extra_ids, cfg.n), cfg.max_ids)
        rank = np.minimum(np.searchsorted(cdf, rng.random(int(lengths.sum())), side="right"), tab.rows - 1)
        offs.append(np.concatenate([[0], np.cumsum(lengths)]))
        ids.append(perm[rank])
    return Dataset(dense.astype(np.float32), offs, ids)


def gen_dataset(teacher: ModelGraph, cfg: DataGenConfig = DataGenConfig()) -> Dataset:
    """Features per ``cfg``; labels ~ Bernoulli(fp64 teacher prediction); unit weights."""
    feats = sample_features(teacher, cfg)
    p = predict64(teacher, feats)
    u = np.random.default_rng([cfg.seed, 4]).random(cfg.n)
    labels = (u < p).astype(np.float64)
    return Dataset(feats.dense, feats.offsets, feats.ids, labels, np.ones(cfg.n))


# -- batch sizes -------------------------------------------------------------


def fig4_batch_distribution() -> tuple[np.ndarray, np.ndarray]:
    """(sizes, probabilities): 44% at m=1, 86% below 25, the rest up to 100.

    Only the two anchors are published; mass is spread uniformly over
    m = 2..24 (0.42) and m = 25..100 (0.14).
    """
    sizes = np.arange(1, 101)
    p = np.zeros(100)
    p[0] = 0.44
    p[1:24] = 0.42 / 23
    p[24:] = 0.14 / 76
    return sizes, p / p.sum()


def sample_batch_sizes(n: int, kind: str = "paper-fig4-like", seed: int = 0, fixed: int = 1) -> np.ndarray:
    if kind == "fixed":
        return np.full(n, fixed, dtype=np.int64)
    if kind != "paper-fig4-like":
        raise ValueError(f"unknown batch-size sampler {kind!r}")
    sizes, p = fig4_batch_distribution()
    return np.random.default_rng(seed).choice(sizes, size=n, p=p)


# -- snapshots ---------------------------------------------------------------


@dataclass(frozen=True)
class Drift:
    kind: str = "none"
    step: float = 0.0  # weight-walk: sigma multiple per step; activation-shift: mean shift per step

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ValueError(f"unknown drift kind {self.kind!r}")


def snapshot_models(base: ModelGenConfig, count: int, drift: Drift = Drift()):
    """Yield (model, dense_shift) per snapshot; snapshot k carries k steps of drift."""
    g = gen_model(base)
    rng = np.random.default_rng([base.seed, 5])
    for k in range(count):
        if k > 0 and drift.kind == "weight-walk":
            g = g.copy()
            for n in g.fc_nodes():
                w = g.weights[n.attrs["weight"]]
                sigma = np.sqrt(base.init_gain / w.shape[0])
                g.weights[n.attrs["weight"]] = (w + rng.standard_normal(w.shape) * drift.step * sigma).astype(np.float32)
        shift = k * drift.step if drift.kind == "activation-shift" else 0.0
        yield g, shift


def gen_snapshots(
    base: ModelGenConfig,
    count: int,
    drift: Drift,
    out_dir,
    data: DataGenConfig | None = None,
    calib_n: int = 0,
) -> list[Path]:
    """Write ``snap_000``... each holding ``model/``, ``meta.json`` and optional eval/calib data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (g, shift) in enumerate(snapshot_models(base, count, drift)):
        d = out / f"snap_{k:03d}"
        d.mkdir(exist_ok=True)
        serialize.save(g, d / "model")
        meta = {"snapshot": k, "timestamp": k, "drift": asdict(drift), "dense_shift": shift}
        if data is not None:
            ev = gen_dataset(g, replace(data, dense_shift=shift, seed=data.seed + 1000 * k))
            ev.save(d / "eval.jsonl")
            if calib_n:
                cal = sample_features(g, replace(data, n=calib_n, dense_shift=shift, seed=data.seed + 1000 * k + 1))
                cal.save(d / "calib.jsonl")
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        paths.append(d)
    return paths


def load_config(path, cls):
    with open(path) as f:
        doc = json.load(f)
    return cls.from_dict(doc) if hasattr(cls, "from_dict") else cls(**doc)


__all__ = [
    "DataGenConfig",
    "Drift",
    "Fault",
    "ModelGenConfig",
    "fig4_batch_distribution",
    "gen_dataset",
    "gen_model",
    "gen_snapshots",
    "geometric_rows",
    "sample_batch_sizes",
    "sample_features",
    "snapshot_models",
    "zipf_probs",
    "ConfigError",
]
