from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from doubles import ReorderedBackend
from lpq.dataset import Dataset
from lpq.debugger import (
    DebugBundle,
    compare_backends,
    extract_bundle,
    inject_scale_fault,
    parse_report,
    rank_samples,
    report,
    shadow_run,
    suggest,
    summarize,
)
from lpq.graph import FC, REFERENCE, SIGMOID, Backend, ModelGraph, Node, run, to_fp16
from lpq.metrics import exact_delta_total, normalized_entropy
from lpq.tables import EmbeddingTable


@pytest.fixture(scope="module")
def bundle(quantized, benign, eval_small):
    return extract_bundle(quantized, eval_small, n=256, seed=1, also=(benign,))


def test_bundle_shrinks_and_matches(bundle, quantized, benign, eval_small):
    for name, rows in bundle.remap.items():
        assert bundle.model.tables[name].rows == len(rows) <= quantized.tables[name].rows
    sub = eval_small.take(bundle.source_index)
    assert np.array_equal(run(quantized, sub).view(np.uint32), run(bundle.model, bundle.data).view(np.uint32))
    assert np.array_equal(run(benign, sub).view(np.uint32), run(bundle.shrink(benign), bundle.data).view(np.uint32))


def test_bundle_counts_unique_ids():
    rows = 10_000
    g = ModelGraph(
        [
            Node("sls", "SparseLengthsSum", ["s0"], ["p"], {"table": "t"}),
            Node("fc", FC, ["p"], ["z"], {"weight": "w", "bias": "b", "in_dim": 4, "out_dim": 1}),
            Node("sig", SIGMOID, ["z"], ["prob"]),
        ],
        {"w": np.ones((4, 1), dtype=np.float32), "b": np.zeros(1, dtype=np.float32)},
        {"t": EmbeddingTable("t", 32, 4, np.random.default_rng(0).standard_normal((rows, 4)).astype(np.float32))},
        {"dense": "d", "dense_dim": 1, "sparse": ["s0"], "output": "prob"},
    )
    ids = np.repeat(np.arange(17) * 500, 2)
    data = Dataset(np.zeros((17, 1)), [np.arange(0, 35, 2)], [ids], np.arange(17) % 2, None)
    b = extract_bundle(g, data, n=17)
    assert b.model.tables["t"].rows == 17
    assert np.array_equal(b.remap["t"], np.arange(17) * 500)


def test_bundle_full_dataset_union(quantized, eval_small):
    small = eval_small.slice(0, 64)
    b = extract_bundle(quantized, small, n=64)
    for s, name in enumerate(f"emb_{i}" for i in range(8)):
        assert np.array_equal(b.remap[name], np.unique(small.ids[s]))


def test_bundle_save_load(bundle, tmp_path):
    bundle.save(tmp_path / "b")
    back = DebugBundle.load(tmp_path / "b")
    assert np.array_equal(back.source_index, bundle.source_index)
    assert np.array_equal(run(back.model, back.data), run(bundle.model, bundle.data))
    with pytest.raises(ValueError):
        extract_bundle(bundle.model, bundle.data, n=10_000)


def test_rank_identical_graphs(bundle, benign):
    ranked = rank_samples(bundle, benign, benign)
    assert [r.index for r in ranked] == list(range(len(bundle.data)))
    assert all(r.delta == 0 and r.delta_lo == 0 for r in ranked)


def test_rank_delta_sum_exact(bundle, quantized, benign):
    ranked = rank_samples(bundle, quantized, benign)
    total = exact_delta_total([r.delta for r in ranked], [r.delta_lo for r in ranked])
    exact = sum((Fraction(r.ce_lowp) - Fraction(r.ce_fp32) for r in ranked), Fraction(0))
    assert total == float(exact)
    d = bundle.data
    num_l = normalized_entropy(run(bundle.model, d), d).numerator
    num_f = normalized_entropy(run(bundle.shrink(benign), d), d).numerator
    assert total == pytest.approx(num_l - num_f, abs=1e-12)
    deltas = [r.delta for r in ranked]
    assert deltas == sorted(deltas, reverse=True)


def test_faulty_embedding_row_ranks_first(bundle, quantized, benign):
    d = bundle.data
    name, slot = "emb_0", 0
    counts = np.bincount(d.ids[slot], minlength=bundle.model.tables[name].rows)
    lengths = np.diff(d.offsets[slot])
    owner = np.repeat(np.arange(len(d)), lengths)
    row = int(np.flatnonzero(counts == 1)[0])
    victim = int(owner[np.flatnonzero(d.ids[slot] == row)[0]])
    # corrupt that row in the full-size table
    orig_row = int(bundle.remap[name][row])
    t = quantized.tables[name]
    firsts = []
    for factor in (200.0, -200.0):
        scales = t.scales.copy()
        scales[orig_row] *= factor
        bad = quantized.copy()
        bad.tables[name] = replace(t, scales=scales)
        ranked = rank_samples(bundle, bad, benign)
        # the victim moves most; it ranks first whenever the fault hurts it
        assert max(ranked, key=lambda r: abs(r.delta)).index == victim
        v = next(r for r in ranked if r.index == victim)
        if v.delta > 0:
            firsts.append(ranked[0].index)
    assert firsts and all(i == victim for i in firsts)


def test_shadow_fp32_all_zero(bundle, benign):
    recs = shadow_run(bundle, to_fp16(benign, None), benign)
    # fp16 weight storage is low precision; fp32 graph against itself has no low-precision nodes
    assert shadow_run(bundle, benign, benign) == []
    assert all(r.rel_l2 >= 0 for r in recs)


def test_shadow_localizes_scale_fault(bundle, quantized, benign):
    clean = {r.node: r for r in shadow_run(bundle, quantized, benign)}
    order = ["bot_fc0", "bot_fc1", "top_fc0", "top_fc1", "top_fc2"]
    for layer in ("bot_fc0", "top_fc1"):
        assert shadow_run(bundle, inject_scale_fault(quantized, layer), benign)[0].node == layer
        # a shrinking fault keeps downstream activations inside their calibrated ranges
        recs = shadow_run(bundle, inject_scale_fault(quantized, layer, 0.25), benign)
        assert recs[0].node == layer
        errs = {r.node: r for r in recs}
        for other in order:
            if other == layer or other not in clean:
                continue
            if order.index(other) < order.index(layer):
                # upstream of the fault nothing changes
                assert errs[other].rel_l2 == clean[other].rel_l2
            else:
                # downstream layers see shifted inputs but keep their own small error
                assert errs[other].rel_l2 < 4 * clean[other].rel_l2
                assert errs[other].rel_l2 < errs[layer].rel_l2 / 10
    with pytest.raises(ValueError):
        inject_scale_fault(quantized, "sls_0")


def test_shadow_record_stats(bundle, quantized, benign):
    recs = shadow_run(bundle, quantized, benign, samples=range(32))
    fc = next(r for r in recs if r.node == "top_fc0")
    assert len(fc.per_sample) == 32
    for key in ("min", "max", "mean", "std", "p1", "p99", "hist"):
        assert key in fc.output_stats and key in fc.weight_stats
    assert summarize([]) == {"count": 0}


def test_report_formats(bundle, quantized, benign):
    recs = shadow_run(bundle, inject_scale_fault(quantized, "top_fc0"), benign)
    samples = rank_samples(bundle, quantized, benign)
    doc = parse_report(report(recs, samples, "structured"))
    assert doc["top_ops"][0]["node"] == "top_fc0"
    assert "skip" in doc["top_ops"][0]["suggestions"]
    assert len(doc["top_samples"]) == 20 and len(doc["top_ops"]) <= 10
    text = report(recs, samples)
    assert "top_fc0" in text and "try:" in text
    empty = parse_report(report([], [], "structured"))
    assert empty["top_ops"] == [] and empty["top_samples"] == [] and empty["suggestions"] == []
    assert "(none)" in report([], [])
    with pytest.raises(ValueError):
        report(recs, samples, "xml")


def test_suggest_rules():
    assert suggest({"rel_l2": 0.001, "kind": "FCRelu"}) == []
    assert suggest({"rel_l2": 0.05, "kind": "FCRelu"})[0].startswith("per_channel_weights")
    assert suggest({"rel_l2": 0.5, "kind": "FullyConnected"})[0] == "skip"
    assert suggest({"rel_l2": 0.5, "kind": "SparseLengthsSum"}) == ["keep this operator in higher precision"]


def test_compare_backend_with_itself(benign, quantized, eval_small):
    batch = eval_small.slice(0, 64)
    for g in (benign, quantized):
        diff = compare_backends(g, REFERENCE, Backend(name="again"), batch)
        assert diff.num_diffs == 0 and diff.output_equal and diff.first_divergence is None


def test_compare_reordered_backend(benign, eval_small):
    batch = eval_small.slice(0, 64)
    diff = compare_backends(benign, REFERENCE, ReorderedBackend(), batch)
    assert diff.local_first_divergence == "bot_fc0"
    assert diff.first_divergence == "bot_fc0"
    first = next(n for n in diff.nodes if n["node"] == "bot_fc0")
    assert 0 < first["max_abs"] < 1e-5
    assert diff.operands["node"] == "bot_fc0"
    d = diff.to_dict()
    assert d["first_divergence"] == "bot_fc0"


def test_compare_fp16_accumulate_cancellation():
    n = 64
    w1 = np.zeros((n, 2), dtype=np.float32)
    w1[:, 0] = np.array([[2048.0, 1.0, -2048.0, 1.0][i % 4] for i in range(n)])
    w1[:, 1] = 1.0
    nodes = [
        Node("relu_in", "Relu", ["dense"], ["x"]),
        Node("fc_a", FC, ["x"], ["h"], {"weight": "a.w", "bias": "", "in_dim": n, "out_dim": 2}),
        Node("fc_b", FC, ["h"], ["z"], {"weight": "b.w", "bias": "", "in_dim": 2, "out_dim": 1}),
        Node("sig", SIGMOID, ["z"], ["prob"]),
    ]
    g = ModelGraph(nodes, {"a.w": w1, "b.w": np.full((2, 1), 1e-3, dtype=np.float32)}, {}, {"dense": "dense", "dense_dim": n, "sparse": [], "output": "prob"})
    g16 = to_fp16(g, "fp32")
    batch = Dataset(np.ones((4, n)), [], [])
    diff = compare_backends(g16, Backend(name="acc32", fc16_accum="fp32"), Backend(name="acc16", fc16_accum="fp16"), batch)
    assert diff.first_divergence == "fc_a" and diff.local_first_divergence == "fc_a"
