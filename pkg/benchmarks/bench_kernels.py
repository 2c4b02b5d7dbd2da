"""Time the hot kernels under the Cython core and the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Both implementations must agree bitwise; the script checks that before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from lpq import kernels as K
from lpq.numerics import to_half
from lpq.tables import EmbeddingTable, quantize_table


def cases(rng):
    x = rng.standard_normal((64, 512)).astype(np.float32)
    w = rng.standard_normal((512, 256)).astype(np.float32)
    wh = to_half(w)
    a = rng.standard_normal((16, 32, 64)).astype(np.float32)
    c = rng.standard_normal((16, 64, 32)).astype(np.float32)
    t = EmbeddingTable("t", 32, 64, rng.standard_normal((20000, 64)).astype(np.float32))
    t8 = quantize_table(t, 8)
    lengths = rng.poisson(20, 256) + 1
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    ids = rng.integers(0, t.rows, offsets[-1])
    return {
        "fc_fp32 64x512x256": lambda: K.fc_fp32(x, w),
        "fc_fp16 acc32 64x512x256": lambda: K.fc_fp16(x, wh, accum="fp32"),
        "fc_fp16 acc16 64x512x256": lambda: K.fc_fp16(x, wh, accum="fp16"),
        "bmm fp32 16x32x64x32": lambda: K.batchmatmul(a, c),
        "sls fp32 256 bags": lambda: K.sls_forward(t, offsets, ids),
        "sls int8 rowwise 256 bags": lambda: K.sls_forward(t8, offsets, ids),
        "sls int8 acc16 256 bags": lambda: K.sls_forward(t8, offsets, ids, accum="fp16"),
        "to_half 64x512": lambda: to_half(x),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json")
    a = p.parse_args(argv)
    impls = K.available_impls()
    if "cython" not in impls:
        print("Cython core not built; only the numpy fallback is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in cases(rng).items():
        outs, times = {}, {}
        for impl in impls:
            with K.using(impl):
                outs[impl] = np.asarray(fn())
                n = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
                times[impl] = min(timeit.repeat(fn, number=n, repeat=a.repeat)) / n
        same = all(np.array_equal(outs[impls[0]].view(np.uint8), o.view(np.uint8)) for o in outs.values())
        rows.append({"kernel": name, "seconds": times, "bitwise_equal": same})
    print(f"{'kernel':<28}" + "".join(f"{i:>14}" for i in impls) + "   speedup  equal")
    for r in rows:
        t = r["seconds"]
        speed = t["python"] / t["cython"] if "cython" in t else 1.0
        print(f"{r['kernel']:<28}" + "".join(f"{1e3 * t[i]:>12.3f}ms" for i in impls) + f"{speed:>9.1f}x  {r['bitwise_equal']}")
    if a.json:
        with open(a.json, "w") as f:
            json.dump(rows, f, indent=1)
    return 0 if all(r["bitwise_equal"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
