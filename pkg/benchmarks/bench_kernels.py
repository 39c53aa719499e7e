"""Time the hot kernels under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py --dims 32 48 --repeat 3

Reports the best wall time of each kernel per backend, the speedup, and the
normwise relative difference between the two backends' outputs.
"""

import argparse
import time

import numpy as np

from longseg import _kernels, phantom


def _problem(n, seed=0):
    dims = (n, n, n)
    atlas = phantom.default_atlas(dims, spacing=4)
    rng = phantom.make_rng(seed, 99)
    free = atlas.boundary_free_mask()
    x = atlas.reference_positions + 0.3 * rng.uniform(-1, 1, atlas.reference_positions.shape) * free
    K = atlas.n_classes
    mask = np.ones(dims, dtype=bool)
    lik = rng.uniform(0.05, 1.0, dims + (K,))
    off = rng.normal(size=dims)
    return atlas, x, mask, lik, off


def _kernels_for(atlas, x, mask, lik, off):
    t, a, bg = atlas.tetrahedra, atlas.node_alphas, atlas.background
    ref = atlas.reference_positions
    return {
        "rasterize": lambda: _kernels.rasterize(x, t, a, mask.shape, bg),
        "data_term": lambda: _kernels.data_term(x, t, a, mask, lik, off, bg, want_grad=True),
        "energy": lambda: _kernels.energy(x, ref, t, True, True),
    }


def _flatten(out):
    if isinstance(out, tuple):
        parts = [np.atleast_1d(np.asarray(o, dtype=np.float64)).ravel() for o in out if o is not None]
        return np.concatenate(parts)
    return np.asarray(out, dtype=np.float64).ravel()


def _best(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--dims", type=int, nargs="+", default=[32, 48])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    print(f"{'grid':>6} {'kernel':>10} {'numba s':>10} {'numpy s':>10} {'speedup':>8} {'rel diff':>13}")
    for n in args.dims:
        prob = _problem(n)
        kern = _kernels_for(*prob)
        for name, fn in kern.items():
            _kernels.set_backend("numba")
            fn()  # compile outside the timing
            t_nb, out_nb = _best(fn, args.repeat)
            _kernels.set_backend("numpy")
            t_np, out_np = _best(fn, args.repeat)
            a, b = _flatten(out_nb), _flatten(out_np)
            diff = np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)
            print(f"{n:>5}^3 {name:>10} {t_nb:>10.4f} {t_np:>10.4f} {t_np / t_nb:>8.1f} {diff:>13.2e}")
    _kernels.set_backend("numba")


if __name__ == "__main__":
    main()
