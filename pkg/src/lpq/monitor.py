"""Accuracy monitor over a sequence of retrained model snapshots."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib import Histogram
from .dataset import Dataset
from .graph import apply_scheme, calibrate, predict, quantize_tables, serialize
from .graph.execute import REFERENCE, Backend, as_float, feeds
from .graph.ir import ModelGraph
from .metrics import NE_DIFF_MAX, compare_predictions, per_layer_error
from .scheme import QuantScheme

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TOP_LAYERS = 5
SHADOW_SAMPLES = 1024
CALIB_SIZE = 2048


class UnsupportedOpError(NotImplementedError):
    pass


@dataclass
class MonitorResult:
    records: list[dict] = field(default_factory=list)

    @property
    def alerted(self) -> bool:
        return any(r["alert"] for r in self.records)

    @property
    def load_errors(self) -> list[str]:
        return [r["snapshot_id"] for r in self.records if r.get("error")]

    @property
    def exit_status(self) -> int:
        return 4 if self.alerted else 0


def list_snapshots(snapshot_dir) -> list[Path]:
    """Snapshot directories in name order."""
    return sorted(p for p in Path(snapshot_dir).iterdir() if p.is_dir())


def _snapshot_meta(d: Path) -> dict:
    p = d / "meta.json"
    return json.loads(p.read_text()) if p.exists() else {}


def _top_layers(errors: dict[str, float], k: int = TOP_LAYERS) -> list[list]:
    ranked = sorted(errors.items(), key=lambda kv: (-kv[1], kv[0]))
    return [[name, float(err)] for name, err in ranked[:k]]


def _snapshot_data(d: Path, name: str, fallback: Dataset | None) -> Dataset | None:
    p = d / name
    return Dataset.load(p) if p.exists() else fallback


def quantize_snapshot(g: ModelGraph, scheme: QuantScheme, hists: dict[str, Histogram], table_mode: str = "int8") -> ModelGraph:
    return apply_scheme(quantize_tables(g, table_mode), scheme, hists)


def monitor_run(
    snapshot_dir,
    scheme: QuantScheme,
    eval_data: Dataset | None = None,
    calib: Dataset | None = None,
    threshold: float = NE_DIFF_MAX,
    log_path=None,
    recalibrate: bool = True,
    table_mode: str = "int8",
    calib_size: int = CALIB_SIZE,
    batch_size: int = 4096,
) -> MonitorResult:
    """Quantize every snapshot with a frozen scheme and evaluate it against its fp32 source.

    Each snapshot directory may carry its own ``eval.jsonl`` / ``calib.jsonl``;
    otherwise ``eval_data`` / ``calib`` are used (calibration falls back to
    the head of the eval set). With ``recalibrate=False`` the activation
    histograms of the first loadable snapshot are reused for all later ones.
    One JSON line per snapshot is appended to ``log_path``.
    """
    result = MonitorResult()
    frozen: dict[str, Histogram] | None = None
    scheme_hash = scheme.digest()
    out = open(log_path, "a") if log_path else None
    try:
        for d in list_snapshots(snapshot_dir):
            meta = _snapshot_meta(d)
            rec = {
                "schema": SCHEMA_VERSION,
                "snapshot_id": d.name,
                "timestamp": meta.get("timestamp"),
                "scheme_hash": scheme_hash,
                "recalibrate": recalibrate,
            }
            try:
                g = serialize.load(d / "model")
                ev = _snapshot_data(d, "eval.jsonl", eval_data)
                if ev is None:
                    raise ValueError("no evaluation data for snapshot")
            except Exception as e:  # recorded, monitoring continues
                log.warning("snapshot %s failed to load: %s", d.name, e)
                rec.update(error=f"load: {type(e).__name__}: {e}", ne_fp32=None, ne_lowp=None, ne_diff=None, top_layers=[], alert=False)
            else:
                cal = _snapshot_data(d, "calib.jsonl", calib) or ev
                cal = cal.slice(0, min(calib_size, len(cal)))
                if recalibrate or frozen is None:
                    hists = calibrate(g, cal)
                    if frozen is None:
                        frozen = {k: h.copy() for k, h in hists.items()}
                if not recalibrate:
                    hists = frozen
                gq = quantize_snapshot(g, scheme, hists, table_mode)
                cmp = compare_predictions(predict(gq, ev, batch_size), predict(g, ev, batch_size), ev)
                errors = per_layer_error(gq, g, ev.slice(0, min(SHADOW_SAMPLES, len(ev))))
                rec.update(
                    error=None,
                    ne_fp32=cmp.ne_fp32,
                    ne_lowp=cmp.ne_lowp,
                    ne_diff=cmp.ne_diff,
                    top_layers=_top_layers(errors),
                    alert=bool(cmp.ne_diff > threshold),
                )
                if rec["alert"]:
                    log.warning("snapshot %s: ne_diff %.3g%% above threshold", d.name, 100 * cmp.ne_diff)
            result.records.append(rec)
            if out:
                out.write(json.dumps(rec, sort_keys=True) + "\n")
                out.flush()
    finally:
        if out:
            out.close()
    return result


def read_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# -- backend emulation -------------------------------------------------------


def _local_errors(g: ModelGraph, batch: Dataset, base: Backend, emul: Backend) -> dict[str, float]:
    """Relative L2 of each node under ``emul`` against ``base``, both fed base's inputs."""
    env = feeds(g, batch)
    out = {}
    with base.session():
        base_out = {}
        for node in g.nodes:
            y = base.execute(node, [env[t] for t in node.inputs], g)
            env[node.outputs[0]] = base_out[node.name] = y
    with emul.session():
        for node in g.nodes:
            y = emul.execute(node, [env[t] for t in node.inputs], g)
            a = as_float(base_out[node.name]).astype(np.float64)
            b = as_float(y).astype(np.float64)
            out[node.name] = float(np.linalg.norm(b - a) / (np.linalg.norm(a) + 1e-12))
    return out


def emulation_compare(g_lowp: ModelGraph, backend_ref: Backend, eval_data: Dataset, backend: Backend = REFERENCE, batch_size: int = 4096, layer_samples: int = SHADOW_SAMPLES) -> dict:
    """Run a quantized model under an emulation backend and the default one side by side."""
    missing = sorted({n.kind for n in g_lowp.nodes if not backend_ref.supports(n.kind)})
    if missing:
        raise UnsupportedOpError(f"backend {backend_ref.name!r} does not implement {', '.join(missing)}")
    p_emul = predict(g_lowp, eval_data, batch_size, backend_ref)
    p_base = predict(g_lowp, eval_data, batch_size, backend)
    cmp = compare_predictions(p_emul, p_base, eval_data)
    errors = _local_errors(g_lowp, eval_data.slice(0, min(layer_samples, len(eval_data))), backend, backend_ref)
    return {
        "schema": SCHEMA_VERSION,
        "backend": backend.name,
        "backend_ref": backend_ref.name,
        "ne_base": cmp.ne_fp32,
        "ne_emul": cmp.ne_lowp,
        "ne_diff": cmp.ne_diff,
        "bitwise_equal": bool(np.array_equal(p_emul.view(np.uint32), p_base.view(np.uint32))),
        "layer_errors": dict(sorted(errors.items())),
        "top_layers": _top_layers(errors),
    }
