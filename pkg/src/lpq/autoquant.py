"""Automatic quantization: global scheme search, then per-layer refinement with skipping."""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .calib import Histogram
from .dataset import Dataset
from .graph import apply_scheme, calibrate, predict, quantize_tables
from .graph.ir import ModelGraph
from .metrics import NEComparison, compare_predictions, per_layer_error, skipped_flops_ratio
from .quant import PER_CHANNEL, PER_TENSOR, RangeMethod
from .scheme import GlobalScheme, LayerOverride, QuantScheme

log = logging.getLogger(__name__)

LADDER = ("per_channel_weights", "percentile_acts", "l2min_acts", "skip")


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    ne_diff_max: float = 0.0005
    max_skip_flops_ratio: float = 0.2
    small_eval_size: int = 5000
    calib_size: int = 2048
    small_full_gap_max: float = 0.0001
    max_iterations: int = 24
    max_retries: int = 3
    percentile_q: float = 0.99
    table_mode: str = "int8"
    shadow_samples: int = 1024
    batch_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        for k in ("ne_diff_max", "small_full_gap_max"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be > 0")
        if self.max_skip_flops_ratio < 0:
            raise ValueError("max_skip_flops_ratio must be >= 0")
        if min(self.small_eval_size, self.calib_size, self.max_iterations, self.shadow_samples) <= 0:
            raise ValueError("sizes and iteration counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SearchResult:
    scheme: QuantScheme
    ne_diff_small: float
    ne_diff_full: float | None
    skipped_ratio: float
    status: str  # pass / fail
    stage: int = 1
    iterations: int = 0
    retries: int = 0
    reason: str = ""
    model: ModelGraph | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "ne_diff_small": self.ne_diff_small,
            "ne_diff_full": self.ne_diff_full,
            "skipped_ratio": self.skipped_ratio,
            "status": self.status,
            "stage": self.stage,
            "iterations": self.iterations,
            "retries": self.retries,
            "reason": self.reason,
        }


class SearchLog:
    """Line-delimited search records, kept in memory and optionally appended to a file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = path
        if path is not None:
            open(path, "w").close()

    def write(self, event: str, **rec) -> None:
        rec = {"seq": len(self.records), "event": event, **rec}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


# -- data --------------------------------------------------------------------


def _has_both(d: Dataset) -> bool:
    return d.labels is not None and bool((d.labels == 1).any() and (d.labels == 0).any())


def sample_datasets(train_source: Dataset, eval_source: Dataset, cfg: SearchConfig, scale: int = 1, seed: int | None = None):
    """(calibration set, small eval set): seeded uniform samples without replacement.

    The eval sample is redrawn (up to 10 times) until it has both label classes.
    Indices are kept in source order, so asking for the whole source returns it unchanged.
    """
    if len(train_source) == 0 or len(eval_source) == 0:
        raise SamplingError("empty source")
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 11])
    n_cal = min(cfg.calib_size * scale, len(train_source))
    cal = train_source.take(np.sort(rng.choice(len(train_source), n_cal, replace=False)))
    n_ev = min(cfg.small_eval_size * scale, len(eval_source))
    for _ in range(10):
        ev = eval_source.take(np.sort(rng.choice(len(eval_source), n_ev, replace=False)))
        if _has_both(ev):
            return cal, ev
    raise SamplingError(f"could not draw an eval sample of {n_ev} with both label classes after 10 tries")


class Evaluator:
    """NE_diff of candidate graphs against cached fp32 predictions on one dataset."""

    def __init__(self, g_fp32: ModelGraph, data: Dataset, batch_size: int = 4096):
        self.data = data
        self.batch_size = batch_size
        self.p_fp32 = predict(g_fp32, data, batch_size)

    def predict(self, g: ModelGraph) -> np.ndarray:
        return predict(g, self.data, self.batch_size)

    def compare(self, g: ModelGraph) -> NEComparison:
        return compare_predictions(self.predict(g), self.p_fp32, self.data)


# -- stage 1 -----------------------------------------------------------------


def global_candidates(q: float = 0.99) -> list[GlobalScheme]:
    acts = [RangeMethod.minmax(), RangeMethod.percentile(q), RangeMethod.l2min()]
    weights = [RangeMethod.minmax(), RangeMethod.percentile(q)]
    return [
        GlobalScheme(a, w, gr, sk)
        for a, w, gr, sk in itertools.product(acts, weights, [PER_TENSOR, PER_CHANNEL], [False, True])
    ]


@dataclass
class _Ctx:
    g: ModelGraph  # fp32 source model
    base: ModelGraph  # source with quantized tables; schemes apply on top of it
    hists: dict[str, Histogram]
    ev: Evaluator
    cfg: SearchConfig
    log: SearchLog

    def build(self, scheme: QuantScheme) -> ModelGraph:
        return apply_scheme(self.base, scheme, self.hists)

    def layer_errors(self, gq: ModelGraph) -> dict[str, float]:
        n = min(self.cfg.shadow_samples, len(self.ev.data))
        errs = per_layer_error(gq, self.g, list(self.ev.data.slice(0, n).batches(self.cfg.batch_size)))
        int8 = {m.name for m in gq.fc_nodes() if m.precision == "int8"}
        return {k: v for k, v in errs.items() if k in int8}


def _pick(rows: list[tuple[GlobalScheme, float, float]], gate: float) -> int:
    """Index of the best candidate.

    Passing candidates are preferred, fewest skipped flops first; otherwise,
    and within equal skipped flops, the lowest ne_diff wins; exact ties go to
    fewer tuned range methods, then enumeration order.
    """
    def key(i):
        gs, nd, ratio = rows[i]
        ok = nd <= gate
        return (not ok, ratio if ok else 0.0, nd, gs.tuned_methods, i)

    return min(range(len(rows)), key=key)


def _global_search(ctx: _Ctx) -> tuple[GlobalScheme, NEComparison, ModelGraph]:
    cfg = ctx.cfg
    rows, built = [], []
    for i, gs in enumerate(global_candidates(cfg.percentile_q)):
        scheme = QuantScheme(gs)
        ratio = skipped_flops_ratio(ctx.g, scheme)
        if ratio > cfg.max_skip_flops_ratio:
            ctx.log.write("candidate", stage=1, index=i, scheme=scheme.to_dict(), skipped_ratio=ratio, excluded="skip budget")
            continue
        gq = ctx.build(scheme)
        cmp = ctx.ev.compare(gq)
        ctx.log.write("candidate", stage=1, index=i, scheme=scheme.to_dict(), label=gs.label(), skipped_ratio=ratio, **cmp.to_dict())
        rows.append((gs, cmp.ne_diff, ratio))
        built.append((cmp, gq))
    if not rows:
        raise ValueError("no global candidate fits the skip budget")
    best = _pick(rows, cfg.ne_diff_max)
    return rows[best][0], built[best][0], built[best][1]


def global_search(g: ModelGraph, calib: Dataset, small_eval: Dataset, cfg: SearchConfig = SearchConfig(), log: SearchLog | None = None):
    """Best GlobalScheme and its NEComparison on the small eval set."""
    ctx = _context(g, calib, small_eval, cfg, log)
    gs, cmp, _ = _global_search(ctx)
    return gs, cmp


# -- stage 2 -----------------------------------------------------------------


def _noop(action: str, scheme: QuantScheme, node: str) -> bool:
    cfg = scheme.layer_config(node)
    if action == "per_channel_weights":
        return cfg.granularity == PER_CHANNEL
    if action == "percentile_acts":
        return cfg.act_in.kind == "percentile"
    if action == "l2min_acts":
        return cfg.act_in.kind == "l2min"
    return False


def _refine(ctx: _Ctx, gs: GlobalScheme, cmp: NEComparison, gq: ModelGraph) -> SearchResult:
    cfg = ctx.cfg
    scheme = QuantScheme(gs)
    ladder: dict[str, int] = {}
    it = 0
    while cmp.ne_diff > cfg.ne_diff_max:
        if it >= cfg.max_iterations:
            return _result(ctx, scheme, cmp, gq, "fail", it, "iteration limit reached")
        errs = ctx.layer_errors(gq)
        if not errs:
            return _result(ctx, scheme, cmp, gq, "fail", it, "no quantized layer left to refine")
        worst = max(errs, key=lambda k: (errs[k], k))
        pos = ladder.get(worst, 0)
        while LADDER[pos] != "skip" and _noop(LADDER[pos], scheme, worst):
            pos += 1
        action = LADDER[pos]
        ladder[worst] = pos + 1
        it += 1
        rec = dict(stage=2, iteration=it, node=worst, action=action, layer_errors=errs, ne_diff_before=cmp.ne_diff)
        if action == "skip":
            cand = scheme.with_override(LayerOverride(worst, "skip"))
            ratio = skipped_flops_ratio(ctx.g, cand)
            if ratio > cfg.max_skip_flops_ratio:
                ctx.log.write("step", **rec, skipped_ratio=ratio, accepted=False, reason="skip budget exceeded")
                return _result(ctx, scheme, cmp, gq, "fail", it, f"skipping {worst} would skip {ratio:.3f} of FC flops")
            scheme, gq = cand, ctx.build(cand)
            cmp = ctx.ev.compare(gq)
            ctx.log.write("step", **rec, skipped_ratio=ratio, accepted=True, **cmp.to_dict())
            continue
        q = cfg.percentile_q if action == "percentile_acts" else None
        cand = scheme.with_override(LayerOverride(worst, action, q))
        cand_g = ctx.build(cand)
        cand_cmp = ctx.ev.compare(cand_g)
        keep = cand_cmp.ne_diff <= cmp.ne_diff
        ctx.log.write("step", **rec, skipped_ratio=skipped_flops_ratio(ctx.g, cand), accepted=keep, **cand_cmp.to_dict())
        if keep:
            scheme, gq, cmp = cand, cand_g, cand_cmp
    return _result(ctx, scheme, cmp, gq, "pass", it, "")


def _result(ctx, scheme, cmp, gq, status, it, reason) -> SearchResult:
    return SearchResult(scheme, cmp.ne_diff, None, skipped_flops_ratio(ctx.g, scheme), status, 2 if it else 1, it, 0, reason, gq)


def iterative_refine(g, best_global: GlobalScheme, calib: Dataset, small_eval: Dataset, cfg: SearchConfig = SearchConfig(), log: SearchLog | None = None) -> SearchResult:
    ctx = _context(g, calib, small_eval, cfg, log)
    scheme = QuantScheme(best_global)
    gq = ctx.build(scheme)
    return _refine(ctx, best_global, ctx.ev.compare(gq), gq)


def _context(g, calib, small_eval, cfg, log) -> _Ctx:
    hists = calibrate(g, calib, cfg.batch_size)
    return _Ctx(g, quantize_tables(g, cfg.table_mode), hists, Evaluator(g, small_eval, cfg.batch_size), cfg, log or SearchLog())


def search_once(g: ModelGraph, calib: Dataset, small_eval: Dataset, cfg: SearchConfig, log: SearchLog) -> SearchResult:
    """Stage 1, then stage 2 when the best global scheme misses the gate."""
    ctx = _context(g, calib, small_eval, cfg, log)
    gs, cmp, gq = _global_search(ctx)
    log.write("global_best", scheme=QuantScheme(gs).to_dict(), label=gs.label(), **cmp.to_dict())
    return _refine(ctx, gs, cmp, gq)


# -- confirmation ------------------------------------------------------------


def confirm_on_full_eval(result: SearchResult, g: ModelGraph, full_eval: Dataset, cfg: SearchConfig, rerun, log: SearchLog | None = None) -> SearchResult:
    """Check a passing result on the full eval set; on a gap or a failed gate, redo the search with doubled samples.

    ``rerun(scale)`` repeats the search with sample sizes multiplied by
    ``scale`` and returns a new SearchResult.
    """
    log = log or SearchLog()
    ev = Evaluator(g, full_eval, cfg.batch_size)
    retries = 0
    while True:
        if result.status != "pass":
            result.retries = retries
            return result
        gq = result.model if result.model is not None else apply_scheme(quantize_tables(g, cfg.table_mode), result.scheme, None)
        full = ev.compare(gq).ne_diff
        result.ne_diff_full = full
        gap = abs(full - result.ne_diff_small)
        ok_gap = gap <= cfg.small_full_gap_max
        ok_gate = full <= cfg.ne_diff_max
        log.write("confirm", retry=retries, ne_diff_small=result.ne_diff_small, ne_diff_full=full, gap=gap, ok=ok_gap and ok_gate)
        if ok_gap and ok_gate:
            result.retries = retries
            return result
        if retries >= cfg.max_retries:
            result.status = "fail"
            result.retries = retries
            why = "gap" if not ok_gap else "gate"
            result.reason = f"full-eval {why} check failed after {retries} retries (small {result.ne_diff_small:.6f}, full {full:.6f})"
            return result
        retries += 1
        result = rerun(2**retries)


def auto_quantize(
    g: ModelGraph,
    train_source: Dataset,
    eval_source: Dataset,
    cfg: SearchConfig = SearchConfig(),
    log: SearchLog | None = None,
) -> SearchResult:
    """The full workflow: sample, search, refine, confirm on the full eval source."""
    log = log or SearchLog()
    t0 = time.perf_counter()
    log.write("config", config=cfg.to_dict())

    def attempt(scale: int) -> SearchResult:
        calib, small = sample_datasets(train_source, eval_source, cfg, scale)
        log.write("sample", scale=scale, calib_size=len(calib), eval_size=len(small))
        return search_once(g, calib, small, cfg, log)

    res = confirm_on_full_eval(attempt(1), g, eval_source, cfg, attempt, log)
    log.write("result", wall_s=round(time.perf_counter() - t0, 3), **res.to_dict())
    return res


def rerun_scheme(g: ModelGraph, scheme: QuantScheme, calib: Dataset, small_eval: Dataset, cfg: SearchConfig = SearchConfig()) -> float:
    """ne_diff of a scheme re-applied from scratch (reproducibility check)."""
    hists = calibrate(g, calib, cfg.batch_size)
    gq = apply_scheme(quantize_tables(g, cfg.table_mode), scheme, hists)
    return Evaluator(g, small_eval, cfg.batch_size).compare(gq).ne_diff


__all__ = [
    "Evaluator",
    "LADDER",
    "SamplingError",
    "SearchConfig",
    "SearchLog",
    "SearchResult",
    "auto_quantize",
    "confirm_on_full_eval",
    "global_candidates",
    "global_search",
    "iterative_refine",
    "rerun_scheme",
    "sample_datasets",
    "search_once",
]
