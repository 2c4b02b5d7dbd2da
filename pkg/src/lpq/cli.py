"""Command-line entry point: ``lpq <command> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_GATE = 4
EXIT_INTERNAL = 5

log = logging.getLogger("lpq")


class ConfigFailure(Exception):
    pass


class DataFailure(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    wall_s: float = 0.0
    exit_code: int = 0
    path: Path | None = None  # where the manifest goes

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
            "wall_s": self.wall_s,
            "exit_code": self.exit_code,
        }

    def write(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return p


# -- helpers -----------------------------------------------------------------


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigFailure(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigFailure(f"invalid JSON in {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigFailure(f"{path}: config must be a JSON object")
    return doc


def _merge(config_path, flags: dict) -> dict:
    """Defaults < config file < command-line flags (flags left as None do not override)."""
    doc = _read_json(config_path) if config_path else {}
    doc.update({k: v for k, v in flags.items() if v is not None})
    return doc


def _build(cls, doc: dict):
    try:
        return cls.from_dict(dict(doc))
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigFailure(f"invalid {cls.__name__}: {e}") from None


def _load_model(path):
    from .graph import ChecksumError, ModelFormatError, load

    try:
        return load(path)
    except (FileNotFoundError, ModelFormatError, ChecksumError, OSError, ValueError) as e:
        raise DataFailure(f"cannot load model {path}: {e}") from None


def _load_data(path):
    from .dataset import Dataset

    try:
        return Dataset.load(path)
    except (FileNotFoundError, OSError, ValueError, KeyError) as e:
        raise DataFailure(f"cannot load dataset {path}: {e}") from None


def _out_dir(path: str) -> Path:
    return Path(path).parent


def _beside(path) -> Path:
    """Manifest location for an output: ``<file>.manifest.json`` or ``<dir>.manifest.json``."""
    p = Path(path)
    return p.parent / f"{p.name}.manifest.json"


def _parse_fault(text: str):
    from .datagen import Fault

    parts = text.split(":")
    if len(parts) < 2:
        raise ConfigFailure(f"fault must look like LAYER:KIND[:MAGNITUDE], got {text!r}")
    kw = {}
    if len(parts) > 2:
        key = "magnitude" if parts[1] == "outlier-weights" else "multiplier"
        kw[key] = float(parts[2])
    try:
        return Fault(parts[0], parts[1], **kw)
    except (TypeError, ValueError) as e:
        raise ConfigFailure(str(e)) from None


# -- commands ----------------------------------------------------------------


def cmd_gen_model(a, m: RunManifest) -> int:
    from .datagen import ModelGenConfig, gen_model
    from .graph import save

    doc = _merge(a.config, {"seed": a.seed})
    if a.fault:
        doc["faults"] = [f.__dict__ for f in map(_parse_fault, a.fault)]
    cfg = _build(ModelGenConfig, doc)
    try:
        g = gen_model(cfg)
    except ValueError as e:
        raise ConfigFailure(str(e)) from None
    save(g, a.out)
    m.config, m.seeds, m.outputs = cfg.to_dict(), {"seed": cfg.seed}, {"model": a.out}
    m.path = _beside(a.out)
    return EXIT_OK


def cmd_gen_data(a, m: RunManifest) -> int:
    from .datagen import DataGenConfig, gen_dataset

    g = _load_model(a.model)
    cfg = _build(DataGenConfig, _merge(a.config, {"seed": a.seed, "n": a.n, "dense_shift": a.dense_shift}))
    gen_dataset(g, cfg).save(a.out)
    m.config, m.seeds = cfg.to_dict(), {"seed": cfg.seed}
    m.inputs, m.outputs = {"model": a.model}, {"data": a.out}
    m.path = _beside(a.out)
    return EXIT_OK


def cmd_gen_snapshots(a, m: RunManifest) -> int:
    from .datagen import DataGenConfig, Drift, ModelGenConfig, gen_snapshots

    mcfg = _build(ModelGenConfig, _merge(a.config, {"seed": a.seed}))
    dcfg = _build(DataGenConfig, _merge(a.data_config, {"n": a.n, "seed": a.seed}))
    try:
        drift = Drift(a.drift, a.step)
    except ValueError as e:
        raise ConfigFailure(str(e)) from None
    gen_snapshots(mcfg, a.count, drift, a.out, dcfg if a.n or a.data_config else None, a.calib_n)
    m.config = {"model": mcfg.to_dict(), "data": dcfg.to_dict(), "drift": drift.__dict__, "count": a.count, "calib_n": a.calib_n}
    m.seeds, m.outputs = {"seed": mcfg.seed}, {"snapshots": a.out}
    m.path = _beside(a.out)
    return EXIT_OK


def cmd_calibrate(a, m: RunManifest) -> int:
    from .calib import save_calibration
    from .graph import calibrate

    g = _load_model(a.model)
    data = _load_data(a.data)
    if a.n:
        data = data.slice(0, min(a.n, len(data)))
    hists = calibrate(g, data, a.batch_size)
    save_calibration(hists, a.out, {"model": a.model, "data": a.data, "samples": len(data)})
    m.config = {"batch_size": a.batch_size, "n": a.n}
    m.inputs, m.outputs = {"model": a.model, "data": a.data}, {"calibration": a.out}
    m.path = _beside(a.out)
    return EXIT_OK


def cmd_search(a, m: RunManifest) -> int:
    from .autoquant import SearchConfig, SearchLog, auto_quantize
    from .graph import save

    flags = {
        "seed": a.seed,
        "ne_diff_max": a.ne_diff_max,
        "max_skip_flops_ratio": a.max_skip_flops_ratio,
        "table_mode": a.table_mode,
    }
    cfg = _build(SearchConfig, _merge(a.config, flags))
    g = _load_model(a.model)
    train, ev = _load_data(a.calib), _load_data(a.eval)
    out_dir = _out_dir(a.out_scheme)
    out_dir.mkdir(parents=True, exist_ok=True)
    slog = SearchLog(a.log or out_dir / "search.jsonl")
    res = auto_quantize(g, train, ev, cfg, slog)
    res.scheme.save(a.out_scheme)
    outputs = {"scheme": a.out_scheme, "log": str(slog.path), "result": str(out_dir / "search_result.json")}
    if a.out_model and res.model is not None:
        save(res.model, a.out_model)
        outputs["model"] = a.out_model
    (out_dir / "search_result.json").write_text(json.dumps(res.to_dict(), sort_keys=True, indent=1) + "\n")
    nd = res.ne_diff_full if res.ne_diff_full is not None else res.ne_diff_small
    print(f"status {res.status}: ne_diff {nd:.6g} skipped flops {res.skipped_ratio:.4f} ({res.reason})")
    m.config, m.seeds = cfg.to_dict(), {"seed": cfg.seed}
    m.inputs, m.outputs = {"model": a.model, "calib": a.calib, "eval": a.eval}, outputs
    m.path = _beside(a.out_scheme)
    return EXIT_OK if res.status == "pass" else EXIT_GATE


def cmd_quantize(a, m: RunManifest) -> int:
    from .calib import load_calibration
    from .graph import apply_scheme, quantize_tables, save
    from .graph.transforms import MissingCalibrationError
    from .scheme import QuantScheme

    g = _load_model(a.model)
    try:
        scheme = QuantScheme.load(a.scheme)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigFailure(f"cannot load scheme {a.scheme}: {e}") from None
    try:
        hists = load_calibration(a.calib)
    except (OSError, ValueError, KeyError) as e:
        raise DataFailure(f"cannot load calibration {a.calib}: {e}") from None
    try:
        gq = apply_scheme(quantize_tables(g, a.table_mode), scheme, hists)
    except MissingCalibrationError as e:
        raise DataFailure(str(e)) from None
    save(gq, a.out)
    m.config = {"scheme": scheme.to_dict(), "table_mode": a.table_mode}
    m.inputs, m.outputs = {"model": a.model, "scheme": a.scheme, "calib": a.calib}, {"model": a.out}
    m.path = _beside(a.out)
    return EXIT_OK


def cmd_eval(a, m: RunManifest) -> int:
    from .graph import predict
    from .metrics import compare_predictions, per_layer_error

    ga, gb = _load_model(a.model_a), _load_model(a.model_b)
    data = _load_data(a.data)
    cmp = compare_predictions(predict(ga, data), predict(gb, data), data)
    layers = per_layer_error(ga, gb, data.slice(0, min(a.layer_samples, len(data))))
    doc = {**cmp.to_dict(), "layer_errors": dict(sorted(layers.items()))}
    print(f"NE a {cmp.ne_lowp:.6f}  NE b {cmp.ne_fp32:.6f}  ne_diff {100 * cmp.ne_diff:.4f}%")
    for name, err in sorted(layers.items(), key=lambda kv: (-kv[1], kv[0]))[:10]:
        print(f"  {name:<16} rel_l2 {err:.4g}")
    m.inputs = {"model_a": a.model_a, "model_b": a.model_b, "data": a.data}
    if a.out:
        Path(a.out).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        m.outputs = {"report": a.out}
        m.path = _beside(a.out)
    if a.threshold is not None and cmp.ne_diff > a.threshold:
        return EXIT_GATE
    return EXIT_OK


def cmd_debug(a, m: RunManifest) -> int:
    from . import debugger
    from .graph import save

    gl, gf = _load_model(a.model_lowp), _load_model(a.model_fp32)
    data = _load_data(a.data)
    if a.n > len(data):
        raise ConfigFailure(f"--n {a.n} exceeds dataset size {len(data)}")
    bundle = debugger.extract_bundle(gl, data, a.n, a.seed, also=(gf,))
    out = Path(a.out)
    bundle.save(out / "bundle")
    save(bundle.shrink(gf), out / "bundle" / "model_fp32")
    recs = debugger.shadow_run(bundle, gl, gf)
    samples = debugger.rank_samples(bundle, gl, gf)
    text = debugger.report(recs, samples, "text", a.top_ops, a.top_samples)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(debugger.report(recs, samples, "structured", a.top_ops, a.top_samples))
    sys.stdout.write(text)
    m.config, m.seeds = {"n": a.n, "top_ops": a.top_ops, "top_samples": a.top_samples}, {"seed": a.seed}
    m.inputs = {"model_lowp": a.model_lowp, "model_fp32": a.model_fp32, "data": a.data}
    m.outputs = {"bundle": str(out / "bundle"), "report": str(out / "report.txt")}
    m.path = _beside(out)
    return EXIT_OK


def cmd_monitor(a, m: RunManifest) -> int:
    from .monitor import monitor_run
    from .scheme import QuantScheme

    try:
        scheme = QuantScheme.load(a.scheme)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigFailure(f"cannot load scheme {a.scheme}: {e}") from None
    if not Path(a.snapshots).is_dir():
        raise DataFailure(f"snapshot directory not found: {a.snapshots}")
    ev = _load_data(a.eval) if a.eval else None
    cal = _load_data(a.calib) if a.calib else None
    res = monitor_run(a.snapshots, scheme, ev, cal, a.threshold, a.log, recalibrate=not a.no_recalibrate, table_mode=a.table_mode)
    for r in res.records:
        if r.get("error"):
            print(f"{r['snapshot_id']}: {r['error']}")
        else:
            flag = "ALERT" if r["alert"] else "ok"
            print(f"{r['snapshot_id']}: ne_diff {100 * r['ne_diff']:.4f}% {flag}")
    m.config = {"threshold": a.threshold, "recalibrate": not a.no_recalibrate, "table_mode": a.table_mode, "scheme": scheme.to_dict()}
    m.inputs = {"snapshots": a.snapshots, "scheme": a.scheme, "eval": a.eval, "calib": a.calib}
    m.outputs = {"log": a.log}
    m.path = _beside(a.log)
    return res.exit_status


def _batch_dist(text: str):
    from .datagen import fig4_batch_distribution

    if text in ("fig4", "paper-fig4-like"):
        return fig4_batch_distribution()
    if text.startswith("fixed:"):
        try:
            return int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigFailure(f"bad batch distribution {text!r}") from None
    doc = _read_json(text)
    try:
        return [int(s) for s in doc["sizes"]], [float(p) for p in doc["probs"]]
    except (KeyError, TypeError, ValueError):
        raise ConfigFailure(f"{text}: batch distribution needs 'sizes' and 'probs'") from None


def cmd_roofline(a, m: RunManifest) -> int:
    from . import perfmodel

    try:
        hw = perfmodel.load_hardware(a.hw)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigFailure(str(e)) from None
    g = _load_model(a.model)
    rep = perfmodel.graph_report(g, hw, _batch_dist(a.batch_dist), a.pooling)
    sys.stdout.write(perfmodel.format_report(rep))
    m.config = {"hw": hw.to_dict(), "batch_dist": a.batch_dist, "pooling": a.pooling}
    m.inputs = {"model": a.model}
    if a.out:
        Path(a.out).write_text(json.dumps(rep, sort_keys=True, indent=1) + "\n")
        m.outputs = {"report": a.out}
        m.path = _beside(a.out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpq", description="Low-precision inference toolkit for recommendation models")
    p.add_argument("--version", action="version", version=f"lpq {__version__}")
    p.add_argument("--jobs", type=int, default=1, help="parallelism bound (evaluation is sequential for determinism)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-model", help="generate a synthetic fp32 model")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--fault", action="append", help="LAYER:KIND[:MAGNITUDE], repeatable")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_model)

    s = sub.add_parser("gen-data", help="generate a teacher-labeled dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--dense-shift", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("gen-snapshots", help="generate a directory of drifting snapshots")
    s.add_argument("--config", help="model config")
    s.add_argument("--data-config")
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--drift", default="none", choices=["none", "weight-walk", "activation-shift"])
    s.add_argument("--step", type=float, default=0.0)
    s.add_argument("--n", type=int, help="eval samples per snapshot (omit for models only)")
    s.add_argument("--calib-n", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_snapshots)

    s = sub.add_parser("calibrate", help="collect activation histograms")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, help="use only the first N samples")
    s.add_argument("--batch-size", type=int, default=1024)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("search", help="automatic quantization search")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True, help="training-data source for calibration")
    s.add_argument("--eval", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--ne-diff-max", type=float)
    s.add_argument("--max-skip-flops-ratio", type=float)
    s.add_argument("--table-mode")
    s.add_argument("--log")
    s.add_argument("--out-scheme", required=True)
    s.add_argument("--out-model")
    s.set_defaults(fn=cmd_search)

    s = sub.add_parser("quantize", help="apply a scheme to a model")
    s.add_argument("--model", required=True)
    s.add_argument("--scheme", required=True)
    s.add_argument("--calib", required=True, help="calibration artifact from 'calibrate'")
    s.add_argument("--table-mode", default="int8")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("eval", help="compare two models by NE")
    s.add_argument("--model-a", required=True, help="low-precision model")
    s.add_argument("--model-b", required=True, help="reference model")
    s.add_argument("--data", required=True)
    s.add_argument("--layer-samples", type=int, default=1024)
    s.add_argument("--threshold", type=float, help="exit with the gate code when ne_diff exceeds this")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("debug", help="extract a debug bundle and report")
    s.add_argument("--model-lowp", required=True)
    s.add_argument("--model-fp32", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--top-ops", type=int, default=10)
    s.add_argument("--top-samples", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_debug)

    s = sub.add_parser("monitor", help="evaluate a directory of snapshots")
    s.add_argument("--snapshots", required=True)
    s.add_argument("--scheme", required=True)
    s.add_argument("--eval")
    s.add_argument("--calib")
    s.add_argument("--threshold", type=float, default=0.0005)
    s.add_argument("--no-recalibrate", action="store_true")
    s.add_argument("--table-mode", default="int8")
    s.add_argument("--log", required=True)
    s.set_defaults(fn=cmd_monitor)

    s = sub.add_parser("roofline", help="roofline latency report")
    s.add_argument("--model", required=True)
    s.add_argument("--hw", default="broadwell-like", help="preset name or JSON file")
    s.add_argument("--batch-dist", default="fig4", help="fig4, fixed:M, or JSON {sizes, probs}")
    s.add_argument("--pooling", type=float, default=3.0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_roofline)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("LPQ_LOG_LEVEL", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    a = build_parser().parse_args(argv)
    m = RunManifest(a.command, argv)
    t0 = time.perf_counter()
    try:
        code = a.fn(a, m)
    except ConfigFailure as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFailure as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    m.wall_s = round(time.perf_counter() - t0, 3)
    m.exit_code = code
    if m.path is not None:
        m.write(m.path)
    return code


if __name__ == "__main__":
    sys.exit(main())
