"""Compare the compiled kernels against the numpy fallback.

Runs the hot kernels at training shapes plus one full extractor training
step, under both backends. Invoke directly:

    python benchmarks/bench_kernels.py

Force the fallback at import time for the end-to-end row by running with
EDGEPATCH_PURE_PYTHON=1 (the script does this itself via subprocess).
"""

import json
import os
import subprocess
import sys
import time

import numpy as np


def _time(fn, repeat=5):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_rows():
    from edgepatch._kernels import _fastops  # noqa: F401  (fails if not built)
    from edgepatch._kernels import reference
    from edgepatch import _kernels

    assert _kernels.BACKEND == "cython", (
        "compiled backend unavailable; build it or read the fallback column only")
    rng = np.random.default_rng(0)
    rows = []

    x = rng.normal(size=(32, 32, 128, 64))
    w = rng.normal(size=(64, 32, 3, 3))
    y = _kernels.conv2d_forward(x, w, 2, 1)
    gy = np.ones_like(y)
    rows.append(("conv2d fwd 32x32x128x64 -> 64ch s2",
                 _time(lambda: _kernels.conv2d_forward(x, w, 2, 1)),
                 _time(lambda: reference.conv2d_forward(x, w, 2, 1))))
    rows.append(("conv2d bwd same shape",
                 _time(lambda: _kernels.conv2d_backward(x, w, gy, 2, 1)),
                 _time(lambda: reference.conv2d_backward(x, w, gy, 2, 1))))

    x1 = rng.normal(size=(16, 1, 128, 68))
    w1 = rng.normal(size=(1, 1, 1, 5))
    rows.append(("blur conv 16x1x128x68 1x5",
                 _time(lambda: _kernels.conv2d_forward(x1, w1, 1, 0), 20),
                 _time(lambda: reference.conv2d_forward(x1, w1, 1, 0), 20)))

    xr = rng.normal(size=(32, 32, 64, 32))
    rows.append(("bilinear up x2 32x32x64x32",
                 _time(lambda: _kernels.resize_bilinear(xr, 128, 64), 10),
                 _time(lambda: reference.resize_bilinear(xr, 128, 64), 10)))
    gr = rng.normal(size=(32, 32, 128, 64))
    rows.append(("bilinear grad 128x64 -> 64x32",
                 _time(lambda: _kernels.resize_bilinear_grad(gr, 64, 32), 10),
                 _time(lambda: reference.resize_bilinear_grad(gr, 64, 32), 10)))
    return rows


_STEP_SNIPPET = r"""
import time
import numpy as np
from edgepatch import _kernels
from edgepatch.config import ExtractorTrainConfig
from edgepatch.data import generate_toy_dataset, holdout_split
from edgepatch.extractor import train_extractor

ds = generate_toy_dataset(8, 4, (128, 64), seed=7)
train, _ = holdout_split(ds, 1)
cfg = ExtractorTrainConfig(epochs=2, seed=11)
t0 = time.perf_counter()
train_extractor(train, cfg)
elapsed = time.perf_counter() - t0
print(f"RESULT {_kernels.BACKEND} {elapsed / 4:.4f}")  # 2 epochs x 2 steps
"""


def end_to_end_row():
    out = {}
    for backend, env_extra in (("cython", {}), ("numpy", {"EDGEPATCH_PURE_PYTHON": "1"})):
        env = dict(os.environ, **env_extra)
        proc = subprocess.run([sys.executable, "-c", _STEP_SNIPPET], env=env,
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(proc.stderr)
        line = [l for l in proc.stdout.splitlines() if l.startswith("RESULT")][-1]
        _, got_backend, seconds = line.split()
        assert got_backend == backend, f"expected {backend}, ran {got_backend}"
        out[backend] = float(seconds)
    return "extractor training step (end to end)", out["cython"], out["numpy"]


def main():
    rows = kernel_rows()
    rows.append(end_to_end_row())
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'cython':>9}  {'numpy':>9}  {'speedup':>7}")
    report = []
    for name, fast, slow in rows:
        print(f"{name:<{width}}  {fast:9.4f}  {slow:9.4f}  {slow / fast:6.2f}x")
        report.append({"name": name, "cython_s": fast, "numpy_s": slow,
                       "speedup": slow / fast})
    out_path = os.path.join(os.path.dirname(__file__), "results.json")
    with open(out_path, "w") as f:
        json.dump(report, f, indent=2)
    print(f"\nwrote {out_path}")


if __name__ == "__main__":
    main()
