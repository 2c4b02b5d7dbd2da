import json

import numpy as np
import pytest

from lpq import datagen
from lpq.dataset import Dataset
from lpq.graph import predict, validate
from lpq.graph.serialize import to_bytes
from lpq.metrics import normalized_entropy

SMALL = datagen.ModelGenConfig(num_tables=2, table_rows=(40, 20), emb_dim=4, dense_dim=3, bottom=(8, 4), top=(8, 1), seed=5)


def test_same_seed_identical_model():
    a, b = datagen.gen_model(SMALL), datagen.gen_model(SMALL)
    assert to_bytes(a) == to_bytes(b)
    assert to_bytes(datagen.gen_model(datagen.ModelGenConfig(**{**SMALL.__dict__, "seed": 6}))) != to_bytes(a)


def test_default_model_validates_and_runs(benign, eval_small):
    assert validate(benign) == []
    p = predict(benign, eval_small.slice(0, 100))
    assert p.shape == (100,) and np.all((p > 0) & (p < 1))
    assert len(benign.tables) == 8 and all(t.dim == 32 for t in benign.tables.values())


def test_outlier_fault_construction():
    cfg = datagen.ModelGenConfig(faults=(datagen.Fault("bot_fc1", "outlier-weights", magnitude=50.0),))
    g = datagen.gen_model(cfg)
    assert np.abs(g.weights["bot_fc1.weight"]).max() >= 50.0
    for n in g.fc_nodes():
        if n.name in ("bot_fc1", g.last_fc().name):
            continue  # the last layer is rescaled to the target logit spread
        w = g.weights[n.attrs["weight"]]
        sigma = np.sqrt(cfg.init_gain / w.shape[0])
        assert np.abs(w).max() <= 6 * sigma + 1e-6


def test_wide_range_fault_preserves_function(benign, eval_small):
    cfg = datagen.ModelGenConfig(faults=(datagen.Fault("top_fc0", "wide-dynamic-range"),))
    g = datagen.gen_model(cfg)
    data = eval_small.slice(0, 500)
    assert np.abs(predict(g, data) - predict(benign, data)).max() < 1e-4


def test_bad_configs():
    with pytest.raises(datagen.ConfigError):
        datagen.gen_model(datagen.ModelGenConfig(top=(8, 2)))
    with pytest.raises(datagen.ConfigError):
        datagen.gen_model(datagen.ModelGenConfig(num_tables=2, table_rows=(10,)))
    with pytest.raises(datagen.ConfigError):
        datagen.gen_model(datagen.ModelGenConfig(interaction="dot", bottom=(8, 16)))
    with pytest.raises(datagen.ConfigError):
        datagen.gen_model(datagen.ModelGenConfig(faults=(datagen.Fault("sls_0", "outlier-weights"),)))
    with pytest.raises(ValueError):
        datagen.Fault("bot_fc0", "melted")


def test_dot_interaction_model():
    cfg = datagen.ModelGenConfig(num_tables=3, table_rows=(30, 20, 10), emb_dim=8, bottom=(16, 8), top=(16, 1), interaction="dot")
    g = datagen.gen_model(cfg)
    data = datagen.gen_dataset(g, datagen.DataGenConfig(n=200))
    assert validate(g) == [] and predict(g, data).shape == (200,)


def test_teacher_beats_constant(benign):
    data = datagen.gen_dataset(benign, datagen.DataGenConfig(n=10_000, seed=3))
    ne = normalized_entropy(predict(benign, data), data).ne
    assert ne < 0.99


def test_dataset_deterministic(tmp_path):
    g = datagen.gen_model(SMALL)
    a = datagen.gen_dataset(g, datagen.DataGenConfig(n=300, seed=1))
    b = datagen.gen_dataset(g, datagen.DataGenConfig(n=300, seed=1))
    a.save(tmp_path / "a.jsonl")
    b.save(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = Dataset.load(tmp_path / "a.jsonl")
    assert np.array_equal(back.dense, a.dense) and all(np.array_equal(x, y) for x, y in zip(back.ids, a.ids))


def test_ids_in_range():
    g = datagen.gen_model(SMALL)
    d = datagen.sample_features(g, datagen.DataGenConfig(n=500))
    for slot, ids in zip(g.io["sparse"], d.ids):
        assert ids.min() >= 0 and ids.max() < 40


def test_zipf_head_mass():
    rows = 10_000
    cfg = datagen.ModelGenConfig(num_tables=1, table_rows=(rows,), emb_dim=4, dense_dim=2, bottom=(4,), top=(4, 1))
    g = datagen.gen_model(cfg)
    d = datagen.sample_features(g, datagen.DataGenConfig(n=20_000, zipf_s=1.2))
    counts = np.bincount(d.ids[0], minlength=rows)
    top = np.sort(counts)[::-1][: rows // 100]
    assert top.sum() >= 0.5 * counts.sum()


def test_fig4_distribution():
    sizes, p = datagen.fig4_batch_distribution()
    assert p[sizes == 1][0] == pytest.approx(0.44)
    assert p[sizes < 25].sum() == pytest.approx(0.86)
    s = datagen.sample_batch_sizes(100_000, seed=1)
    assert abs((s == 1).mean() - 0.44) < 0.01 and abs((s < 25).mean() - 0.86) < 0.01
    assert np.all(datagen.sample_batch_sizes(5, "fixed", fixed=7) == 7)
    with pytest.raises(ValueError):
        datagen.sample_batch_sizes(5, "bimodal")


def test_snapshots_no_drift_identical(tmp_path):
    paths = datagen.gen_snapshots(SMALL, 3, datagen.Drift(), tmp_path)
    blobs = [(p / "model" / "weights.bin").read_bytes() for p in paths]
    assert blobs[0] == blobs[1] == blobs[2]
    assert [json.loads((p / "meta.json").read_text())["snapshot"] for p in paths] == [0, 1, 2]


def test_activation_shift_mean(tmp_path):
    step = 0.5
    paths = datagen.gen_snapshots(SMALL, 3, datagen.Drift("activation-shift", step), tmp_path, datagen.DataGenConfig(n=4000))
    for k, p in enumerate(paths):
        ev = Dataset.load(p / "eval.jsonl")
        assert abs(ev.dense.mean() - k * step) < 0.05


def test_weight_walk_changes_weights():
    snaps = list(datagen.snapshot_models(SMALL, 3, datagen.Drift("weight-walk", 0.1)))
    w = [g.weights["top_fc0.weight"] for g, _ in snaps]
    assert not np.array_equal(w[0], w[1]) and not np.array_equal(w[1], w[2])


def test_config_roundtrip(tmp_path):
    cfg = datagen.ModelGenConfig(faults=(datagen.Fault("top_fc1", "outlier-weights", 20.0),), seed=9)
    (tmp_path / "m.json").write_text(json.dumps(cfg.to_dict()))
    assert datagen.load_config(tmp_path / "m.json", datagen.ModelGenConfig) == datagen.ModelGenConfig.from_dict(cfg.to_dict())
    assert datagen.ModelGenConfig.from_dict(cfg.to_dict()).faults == cfg.faults
