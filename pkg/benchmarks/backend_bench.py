"""Compare the compiled encoder core against the pure-Python fallback.

Measures forward and forward+backward throughput on the shipped spaces at
both the desk and paper architecture scales, and verifies agreement while
doing so. Run:  python benchmarks/backend_bench.py [--repeats N]
"""

import argparse
import time

import numpy as np

import treebo
from treebo import encoder as enc
from treebo import spacedsl as sd
from treebo.backend import HAVE_COMPILED, CompiledEncoderBackend


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def bench_case(label, space, cfg, n_configs, repeats):
    params = enc.EncoderParams.for_space(space, cfg, seed=0)
    configs = [
        sd.sample(space, 1 + i % len(space.subspaces), i) for i in range(n_configs)
    ]
    batches = enc.pack_configs(configs)
    backends = [("python", enc.PythonEncoderBackend())]
    if HAVE_COMPILED:
        backends.append(("compiled", CompiledEncoderBackend()))

    results = {}
    for name, be in backends:
        z, vjp = be.encode_with_vjp(params, batches, n_configs)
        dz = np.ones_like(z)
        fwd = time_call(lambda: be.encode(params, batches, n_configs), repeats)

        def fwd_bwd():
            zz, v = be.encode_with_vjp(params, batches, n_configs)
            v(dz)

        both = time_call(fwd_bwd, repeats)
        results[name] = (fwd, both, z, vjp(dz))

    print(f"\n{label}  ({n_configs} configs, {params.n_params} params)")
    print(f"  {'backend':>9}  {'fwd ms':>9}  {'fwd+bwd ms':>11}")
    for name, (fwd, both, _, _) in results.items():
        print(f"  {name:>9}  {fwd:9.3f}  {both:11.3f}")
    if len(results) == 2:
        pf, pb, z_py, g_py = results["python"]
        cf, cb, z_cy, g_cy = results["compiled"]
        z_err = np.abs(z_py - z_cy).max()
        g_err = (np.abs(g_py - g_cy) / np.maximum(np.abs(g_py), 1.0)).max()
        print(f"  speedup: fwd {pf / cf:.1f}x, fwd+bwd {pb / cb:.1f}x"
              f"  (max |dz| {z_err:.1e}, max grad rel diff {g_err:.1e})")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    if not HAVE_COMPILED:
        print("note: compiled core not built; timing the python backend only")

    sim = treebo.load_builtin_space("simulation_bench")
    nas = treebo.load_builtin_space("nas")
    bench_case("desk encoder / simulation space", sim, enc.DESK_CONFIG, 60, args.repeats)
    bench_case("desk encoder / NAS space (29-47 tokens)", nas, enc.DESK_CONFIG, 24, args.repeats)
    bench_case("paper encoder / simulation space", sim, enc.EncoderConfig(), 30,
               max(3, args.repeats // 4))


if __name__ == "__main__":
    main()
