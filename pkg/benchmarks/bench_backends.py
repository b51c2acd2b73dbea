"""Time the hot kernels under the numba and pure-numpy backends.

The backend is fixed at import, so each one runs in its own interpreter:

    python benchmarks/bench_backends.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
import mkrem
from mkrem.dictionary import PatchOperator, extract_patches, omp_batch
from mkrem.kernel import KernelSpec, MultiKernelSpec, build_multi_kernel
from mkrem.linalg import matvec, matvec_transpose, spmm
from mkrem.phantom import make_brain_like_phantom
from mkrem.projector import Geometry, build_system_matrix

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
geom = Geometry()
prior = make_brain_like_phantom().priors[0].reshape(64, 64)
H = build_system_matrix(geom)
K = build_multi_kernel([prior], MultiKernelSpec.repeated(KernelSpec(J=21), 1))
x, q = rng.random(geom.n_voxels), rng.random(geom.n_bins)
D = rng.standard_normal((25, 50))
D /= np.linalg.norm(D, axis=0)
Y = extract_patches(PatchOperator(5, 1, 64, 64), rng.random(4096))

cases = {
    "system matrix build": lambda: build_system_matrix(geom),
    "H x": lambda: matvec(H, x),
    "H^T q": lambda: matvec_transpose(H, q),
    "K a (J=21)": lambda: matvec(K, x),
    "K K (J=21)": lambda: spmm(K, K),
    "OMP 3600 patches, s=8": lambda: omp_batch(D, Y, 8),
}
out = {"backend": mkrem.BACKEND}
for name, fn in cases.items():
    fn()  # warm-up, includes compilation
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    out[name] = best
print(json.dumps(out))
"""


def measure(backend, repeat):
    env = dict(os.environ, MKREM_BACKEND=backend)
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timed repetitions (best is kept)")
    args = ap.parse_args()
    nb, npy = measure("numba", args.repeat), measure("numpy", args.repeat)
    width = max(len(k) for k in nb if k != "backend")
    print(f"{'kernel':<{width}}  {'numba ms':>10}  {'numpy ms':>10}  {'speed-up':>8}")
    for key in nb:
        if key == "backend":
            continue
        print(f"{key:<{width}}  {1e3 * nb[key]:10.2f}  {1e3 * npy[key]:10.2f}  "
              f"{npy[key] / nb[key]:8.1f}")
    if nb["backend"] != "numba":
        print("note: numba unavailable, both columns used numpy")


if __name__ == "__main__":
    main()
