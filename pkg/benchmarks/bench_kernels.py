"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes mirror training (a batch of sentences grouped by length) and
evaluation (scoring every candidate span of a trace).
"""

import argparse
import timeit

import numpy as np

from tgaloc import kernels


def _gru_case(rng, L, B, T):
    xz, xr, xh = (rng.normal(size=(L, B, T)).astype(np.float32) for _ in range(3))
    Uz, Ur, Uh = (rng.uniform(-0.03, 0.03, size=(T, T)).astype(np.float32) for _ in range(3))
    return xz, xr, xh, Uz, Ur, Uh


def _time(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba path unavailable (is TGALOC_DISABLE_NUMBA set?)")
    rng = np.random.default_rng(args.seed)

    cases = []
    for L, B, T in [(6, 128, 64), (6, 128, 1024), (12, 16, 256)]:
        gru = _gru_case(rng, L, B, T)
        hs, zs, rs, cs = kernels.gru_forward_np(*gru)
        dh = rng.normal(size=hs[-1].shape).astype(np.float32)
        back = (dh, hs, zs, rs, cs, *gru[3:])
        cases.append((f"gru_forward  L={L} B={B} T={T}",
                      lambda g=gru: kernels.gru_forward_np(*g), lambda g=gru: kernels.gru_forward_nb(*g)))
        cases.append((f"gru_backward L={L} B={B} T={T}",
                      lambda a=back: kernels.gru_backward_np(*a), lambda a=back: kernels.gru_backward_nb(*a)))

    for n in (16, 64, 256):
        w = rng.dirichlet(np.ones(n))
        spans = np.array([(i, j) for i in range(n) for j in range(i + 1, n + 1)])
        s, e = spans[:, 0].copy(), spans[:, 1].copy()
        cases.append((f"interval_scores n={n} ({len(spans)} spans)",
                      lambda w=w, s=s, e=e: kernels.interval_scores_np(w, s, e, False),
                      lambda w=w, s=s, e=e: kernels.interval_scores_nb(w, s, e, False)))
        cases.append((f"interval_iou    n={n} ({len(spans)} spans)",
                      lambda s=s, e=e, n=n: kernels.interval_iou_np(s, e, n // 4, n // 2),
                      lambda s=s, e=e, n=n: kernels.interval_iou_nb(s, e, n // 4, n // 2)))

    print(f"{'kernel':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_nb in cases:
        t_np, t_nb = _time(f_np, args.repeat), _time(f_nb, args.repeat)
        print(f"{name:42s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
