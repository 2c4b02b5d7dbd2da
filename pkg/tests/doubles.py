"""Test doubles: backends that deliberately deviate from the reference."""

from dataclasses import dataclass

import numpy as np

from lpq.graph.execute import Backend


@dataclass
class ReorderedBackend(Backend):
    """Accumulates fp32 FC reductions right to left instead of left to right."""

    name: str = "reordered"

    def fc(self, node, x, g, relu):
        if node.precision != "fp32":
            return super().fc(node, x, g, relu)
        a = node.attrs
        w = np.asarray(g.weights[a["weight"]], dtype=np.float32)
        x = np.asarray(x, dtype=np.float32)
        acc = np.zeros((x.shape[0], w.shape[1]), dtype=np.float32)
        for t in range(w.shape[0] - 1, -1, -1):
            acc = acc + x[:, t : t + 1] * w[t][None, :]
        if a.get("bias"):
            acc = acc + g.weights[a["bias"]][None, :]
        return np.maximum(acc, np.float32(0)) if relu else acc
