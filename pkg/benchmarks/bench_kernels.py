"""Compare the compiled and numpy convolution kernels.

Each backend runs in its own interpreter (the backend is fixed at import
time), so the numbers are directly comparable. Usage::

    python benchmarks/bench_kernels.py [--repeat 20]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from resproxy import autodiff as ad, kernels
from resproxy import twin, surrogate as S
from resproxy.fluid import FluidProperties

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
cases = {
    # (B, C, D, H, W), (Cout, k, stride, pad): surrogate layers on the 16x16x8 twin
    "enc_first": ((1, 3, 8, 16, 16), (16, 3, 1, 1)),
    "enc_stride": ((1, 16, 8, 16, 16), (32, 3, 2, 1)),
    "rhs": ((1, 48, 2, 4, 4), (64, 3, 1, 1)),
    "decoder_batch": ((25, 32, 2, 4, 4), (32, 3, 1, 1)),
}


def best(fn):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


out = {"backend": kernels.BACKEND}
for name, (shape, (cout, k, s, p)) in cases.items():
    x = rng.standard_normal(shape)
    cols = kernels.im2col3d(x, k, k, k, s, s, s, p, p, p)
    C, D, H, W = shape[1:]
    w = ad.Tensor(rng.standard_normal((cout, C, k, k, k)), requires_grad=True)
    xt = ad.Tensor(x, requires_grad=True)

    def fwd_bwd():
        y = ad.conv3d(xt, w, None, s, p)
        ad.backward(ad.sum(y))

    out[name] = {
        "im2col": best(lambda: kernels.im2col3d(x, k, k, k, s, s, s, p, p, p)),
        "col2im": best(lambda: kernels.col2im3d(cols, C, D, H, W, k, k, k, s, s, s, p, p, p)),
        "conv_fwd_bwd": best(fwd_bwd),
    }

model, fluid = twin.base_model(), FluidProperties()
cfg = S.SurrogateConfig()
cfg.state_mean, cfg.state_std = [1.8e7, 0.3, 0.7], [2e6, 0.1, 0.1]
cfg.static_mean, cfg.static_std = [0.2] + [np.log(1e-13)] * 3, [0.03, 0.6, 0.6, 0.6]
cfg.control_scale = [1e7, 800.0]
sg = S.Surrogate(cfg, seed=1).train()
S.predict(sg, S.RolloutInputs(sg, model, 24), fluid)  # populate batch-norm statistics
sg.eval()
out["simulate_24"] = best(lambda: S.simulate(sg, model, fluid, 24))
print(json.dumps(out))
"""


def run(backend: str, repeat: int) -> dict:
    env = dict(os.environ)
    env["RESPROXY_PURE_PYTHON"] = "1" if backend == "python" else "0"
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(res.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    cy, py = run("cython", args.repeat), run("python", args.repeat)
    if cy["backend"] != "cython":
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'case':<18}{'op':<14}{'numpy ms':>10}{cy['backend'] + ' ms':>12}{'speed-up':>10}")
    for case, ops in py.items():
        if case == "backend":
            continue
        rows = ops.items() if isinstance(ops, dict) else [("rollout", ops)]
        for op, t_py in rows:
            t_cy = cy[case][op] if isinstance(ops, dict) else cy[case]
            print(f"{case:<18}{op:<14}{1e3 * t_py:>10.3f}{1e3 * t_cy:>12.3f}{t_py / t_cy:>9.2f}x")


if __name__ == "__main__":
    main()
