"""Compiled vs pure-python conv3d kernels on the layer shapes of the desk R3D.

    python3 benchmarks/bench_conv3d.py [--batch 8] [--repeat 5] [--json out.json]

For each layer and pass (forward, input grad, weight grad) prints the best of
``--repeat`` timings for the compiled direct kernel, the numpy shift-and-add
fallback and the numpy im2col path, then the speedup of the compiled kernel
over the fastest numpy one.  Results are also checked to agree.
"""
import argparse
import json
import time

import numpy as np

from shotfusion import kernels

# name, in_ch, out_ch, kernel, stride, input extent (T, H, W) before padding
LAYERS = [
    ("stem 3->8 k3x7x7 s1x2x2", 3, 8, (3, 7, 7), (1, 2, 2), (8, 32, 32)),
    ("block 8->8 k3", 8, 8, (3, 3, 3), (1, 1, 1), (8, 16, 16)),
    ("block 8->16 k3 s2", 8, 16, (3, 3, 3), (2, 2, 2), (8, 16, 16)),
    ("shortcut 8->16 k1 s2", 8, 16, (1, 1, 1), (2, 2, 2), (8, 16, 16)),
    ("block 16->16 k3", 16, 16, (3, 3, 3), (1, 1, 1), (4, 8, 8)),
]

VARIANTS = [("compiled", "direct"), ("python", "direct"), ("python", "im2col")]


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_layer(layer, batch, repeat, rng):
    name, cin, cout, k, s, ext = layer
    pad = tuple(v // 2 for v in k)
    xp = rng.normal(size=(batch, cin) + tuple(e + 2 * p for e, p in zip(ext, pad)))
    w = rng.normal(size=(cout, cin) + k)
    out_ext = tuple((e - kk) // ss + 1 for e, kk, ss in zip(xp.shape[2:], k, s))
    g = rng.normal(size=(batch, cout) + out_ext)
    passes = {
        "forward": lambda m: kernels.conv3d_forward(xp, w, s, m),
        "grad_input": lambda m: kernels.conv3d_backward_input(g, w, xp.shape, s, m),
        "grad_weight": lambda m: kernels.conv3d_backward_weight(g, xp, k, s, m),
    }
    rows = []
    for pname, fn in passes.items():
        row = {"layer": name, "pass": pname}
        ref = None
        for backend, method in VARIANTS:
            if backend == "compiled" and not kernels.HAVE_COMPILED:
                continue
            with kernels.use_backend(backend):
                out = fn(method)
                if ref is None:
                    ref = out
                err = float(np.max(np.abs(out - ref)) / max(1.0, np.max(np.abs(ref))))
                if err > 1e-10:
                    raise AssertionError(f"{name} {pname} {backend}/{method} disagrees: {err:.2e}")
                row[f"{backend}_{method}"] = best_time(lambda: fn(method), repeat)
        rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the rows as JSON")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"compiled kernels available: {kernels.HAVE_COMPILED}; batch {args.batch}, best of {args.repeat}")
    cols = [f"{b}_{m}" for b, m in VARIANTS]
    print(f"{'layer':26s} {'pass':12s}" + "".join(f"{c:>18s}" for c in cols) + f"{'speedup':>10s}")
    rows = []
    for layer in LAYERS:
        for row in bench_layer(layer, args.batch, args.repeat, rng):
            rows.append(row)
            cells = "".join(f"{row[c] * 1e3:15.2f} ms" if c in row else f"{'n/a':>18s}" for c in cols)
            speed = ""
            if "compiled_direct" in row:
                fallback = min(row["python_direct"], row["python_im2col"])
                row["speedup"] = fallback / row["compiled_direct"]
                speed = f"{row['speedup']:9.1f}x"
            print(f"{row['layer']:26s} {row['pass']:12s}{cells}{speed:>10s}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
