"""Columnar container for weighted, binary-labeled samples with sparse id lists."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    """``dense`` is (N, D) fp32; each sparse slot is CSR-style (offsets of length N+1, flat ids)."""

    dense: np.ndarray
    offsets: list[np.ndarray]
    ids: list[np.ndarray]
    labels: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.dense = np.ascontiguousarray(self.dense, dtype=np.float32)
        self.offsets = [np.asarray(o, dtype=np.int64) for o in self.offsets]
        self.ids = [np.asarray(i, dtype=np.int64) for i in self.ids]
        n = self.dense.shape[0]
        for o, i in zip(self.offsets, self.ids):
            if o.shape != (n + 1,) or o[0] != 0 or o[-1] != i.size or (np.diff(o) < 0).any():
                raise ValueError("malformed sparse offsets")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (n,):
                raise ValueError("labels length does not match samples")
        if self.weights is None and self.labels is not None:
            self.weights = np.ones(n)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if (self.weights <= 0).any():
                raise ValueError("sample weights must be positive")

    def __len__(self) -> int:
        return int(self.dense.shape[0])

    @property
    def num_slots(self) -> int:
        return len(self.offsets)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        offs, ids = [], []
        for o, i in zip(self.offsets, self.ids):
            lengths = (o[1:] - o[:-1])[idx]
            new_o = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
            sel = np.repeat(o[idx] - new_o[:-1], lengths) + np.arange(new_o[-1])
            offs.append(new_o)
            ids.append(i[sel])
        return Dataset(
            self.dense[idx],
            offs,
            ids,
            None if self.labels is None else self.labels[idx],
            None if self.weights is None else self.weights[idx],
        )

    def slice(self, start: int, stop: int) -> "Dataset":
        start, stop = max(0, start), min(len(self), stop)
        offs, ids = [], []
        for o, i in zip(self.offsets, self.ids):
            offs.append(o[start : stop + 1] - o[start])
            ids.append(i[o[start] : o[stop]])
        return Dataset(
            self.dense[start:stop],
            offs,
            ids,
            None if self.labels is None else self.labels[start:stop],
            None if self.weights is None else self.weights[start:stop],
        )

    def batches(self, size: int):
        for s in range(0, len(self), size):
            yield self.slice(s, s + size)

    def sample_ids(self, slot: int, j: int) -> np.ndarray:
        o = self.offsets[slot]
        return self.ids[slot][o[j] : o[j + 1]]

    @classmethod
    def concat(cls, parts: list["Dataset"]) -> "Dataset":
        slots = parts[0].num_slots
        offs, ids = [], []
        for s in range(slots):
            lengths = np.concatenate([np.diff(p.offsets[s]) for p in parts])
            offs.append(np.concatenate([[0], np.cumsum(lengths)]))
            ids.append(np.concatenate([p.ids[s] for p in parts]))
        labeled = all(p.labels is not None for p in parts)
        return cls(
            np.concatenate([p.dense for p in parts]),
            offs,
            ids,
            np.concatenate([p.labels for p in parts]) if labeled else None,
            np.concatenate([p.weights for p in parts]) if labeled else None,
        )

    # -- line-delimited records --------------------------------------------

    def records(self):
        for j in range(len(self)):
            rec = {
                "dense": [float(v) for v in self.dense[j]],
                "sparse": [self.sample_ids(s, j).tolist() for s in range(self.num_slots)],
            }
            if self.labels is not None:
                rec["label"] = int(self.labels[j])
                rec["weight"] = float(self.weights[j])
            yield rec

    def save(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.records():
                f.write(json.dumps(rec, separators=(",", ":")))
                f.write("\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        dense, sparse, labels, weights = [], None, [], []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{lineno}: bad record: {e}") from None
                dense.append(rec["dense"])
                if sparse is None:
                    sparse = [[] for _ in rec["sparse"]]
                for s, ids in enumerate(rec["sparse"]):
                    sparse[s].append(ids)
                if "label" in rec:
                    labels.append(rec["label"])
                    weights.append(rec.get("weight", 1.0))
        if not dense:
            raise ValueError(f"{path}: no records")
        offs = [np.concatenate([[0], np.cumsum([len(x) for x in slot])]) for slot in sparse]
        ids = [np.asarray([i for x in slot for i in x], dtype=np.int64) for slot in sparse]
        labeled = len(labels) == len(dense)
        return cls(
            np.asarray(dense, dtype=np.float32),
            offs,
            ids,
            np.asarray(labels) if labeled else None,
            np.asarray(weights) if labeled else None,
        )

    def digest(self) -> str:
        h = hashlib.sha256(self.dense.tobytes())
        for o, i in zip(self.offsets, self.ids):
            h.update(o.tobytes())
            h.update(i.tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
            h.update(self.weights.tobytes())
        return h.hexdigest()
