"""End-to-end experiment: simulate data, build kernel/dictionary/graph
artifacts with content-hash caching, reconstruct all realizations and
summarize them.

Output layout under ``output_dir``::

    data/      activity, priors, lesion mask, randoms, sinograms
    cache/     system matrix, kernels, dictionaries, graph
    recon/     per-algorithm traces and final images
    report/    CSV tables, PGM renders, MSE sidecar
    manifest.json
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io
from .config import stable_hash
from .dictionary import (PatchOperator, SparseCoder, build_learning_data, ksvd_learn,
                         local_operator, map_dictionary)
from .errors import MissingCacheError
from .graph import LaplacianPack, build_laplacian
from .kernel import build_multi_kernel, factorize
from .linalg import CSRMatrix
from .metrics import amse_curve, bias_variance_curve, line_profile, mmse, mse_curves
from .phantom import make_brain_like_phantom, poissonize, scale_to_counts
from .projector import SystemModel, build_system_matrix, project
from .recon import run

log = logging.getLogger(__name__)

KERNEL_ALGOS = ("kem", "krem", "mkrem")


def _sha(arr):
    return stable_hash(np.ascontiguousarray(arr, dtype=np.float64).tobytes().hex())


@dataclass(eq=False)
class Dataset:
    """Reference image, priors and noisy sinograms on a fixed system model."""

    width: int
    height: int
    model: SystemModel
    reference: np.ndarray
    priors: list
    lesion_mask: np.ndarray
    sinograms: list

    @property
    def priors_2d(self):
        return [p.reshape(self.height, self.width) for p in self.priors]

    @property
    def priors_hash(self):
        return stable_hash([_sha(p) for p in self.priors])


class Experiment:
    """All pipeline stages for one configuration."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.geom = cfg.geometry
        self._H = None

    # -- paths --------------------------------------------------------------

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def _cache(self, stage, key, suffix=".npz"):
        return self.path("cache", f"{stage}-{key[:16]}{suffix}")

    # -- system matrix and data ---------------------------------------------

    def system_matrix(self):
        if self._H is None:
            key = self.cfg.section_hash("geometry")
            f = self._cache("system", key)
            if f.exists():
                log.info("cache hit: system matrix")
                self._H = io.load_csr(f)
            else:
                log.info("building system matrix")
                self._H = build_system_matrix(self.geom)
                io.save_csr(f, self._H)
        return self._H

    def _phantom(self):
        ph = self.cfg["phantom"]
        return make_brain_like_phantom(self.geom.image_width, self.geom.image_height,
                                       lesion=ph["lesion"], prior_noise=ph["prior_noise"],
                                       seed=ph["seed"], n_priors=ph["n_priors"],
                                       lesion_in_prior=ph["lesion_in_prior"])

    def simulate(self):
        """Scaled reference image, randoms and every noisy realization, in memory."""
        H = self.system_matrix()
        pair = self._phantom()
        noise = self.cfg["noise"]
        model0 = SystemModel(H, np.zeros(H.n_rows))
        clean = project(model0, pair.activity)
        randoms = np.full(H.n_rows, noise["randoms_fraction"] * clean.mean())
        mean = scale_to_counts(clean + randoms, noise["target_counts"])
        scale = noise["target_counts"] / float(np.sum(clean + randoms))
        model = SystemModel(H, randoms * scale)
        sinos = [poissonize(mean, self.cfg.seed, i) for i in range(noise["n_realizations"])]
        return Dataset(self.geom.image_width, self.geom.image_height, model,
                       pair.activity * scale, pair.priors, pair.lesion_mask, sinos)

    def write_data(self, data):
        w, h = data.width, data.height
        out = [self.path("data", "activity.f64"), self.path("data", "lesion_mask.f64"),
               self.path("data", "randoms.f64")]
        io.write_image(out[0], data.reference, w, h)
        io.write_image(out[1], data.lesion_mask.astype(np.float64), w, h)
        io.atomic_write(out[2], f"{data.model.n_bins} 1\n".encode()
                        + data.model.r.astype("<f8").tobytes())
        for t, p in enumerate(data.priors):
            out.append(self.path("data", f"prior_{t}.f64"))
            io.write_image(out[-1], p, w, h)
        for i, s in enumerate(data.sinograms):
            out.append(self.path("data", f"sinogram_{i:03d}.f64"))
            io.write_image(out[-1], s, self.geom.n_radial, self.geom.n_angles)
        io.write_pgm(self.path("data", "activity.pgm"), data.reference, w, h)
        io.write_pgm(self.path("data", "prior_0.pgm"), data.priors[0], w, h)
        return out

    def load_data(self):
        d = self.path("data")
        if not (d / "activity.f64").exists():
            raise MissingCacheError(f"no simulated data in {d}; run the 'phantom' command first")
        ref, w, h = io.read_image(d / "activity.f64")
        mask, _, _ = io.read_image(d / "lesion_mask.f64")
        raw = (d / "randoms.f64").read_bytes()
        r = np.frombuffer(raw[raw.index(b"\n") + 1:], dtype="<f8").astype(np.float64)
        priors = [io.read_image(d / f"prior_{t}.f64")[0]
                  for t in range(self.cfg["phantom"]["n_priors"])]
        n = self.cfg["noise"]["n_realizations"]
        sinos = []
        for i in range(n):
            f = d / f"sinogram_{i:03d}.f64"
            if not f.exists():
                raise MissingCacheError(f"missing sinogram {f}; run the 'phantom' command first")
            sinos.append(io.read_image(f)[0])
        model = SystemModel(self.system_matrix(), r)
        return Dataset(w, h, model, ref, priors, mask.astype(bool), sinos)

    # -- kernel-side artifacts ----------------------------------------------

    def _kernel_key(self, which, G, J, data):
        block = dict(self.cfg[which], G=G)
        if J is not None:
            block["J"] = int(J)
        return stable_hash({"block": block, "priors": data.priors_hash})

    def kernel(self, data, which="kernel_a", G=None, J=None, require_cached=False):
        G = self.cfg[which]["G"] if G is None else G
        key = self._kernel_key(which, G, J, data)
        f = self._cache(f"{which}-G{G}", key)
        if f.exists():
            log.info("cache hit: %s (G=%d)", which, G)
            return io.load_csr(f)
        if require_cached:
            raise MissingCacheError(f"kernel matrix {which} (G={G}) is not built; "
                                    "run the 'build' command first")
        log.info("building %s (G=%d, J=%s)", which, G, J or self.cfg[which]["J"])
        K = build_multi_kernel(data.priors_2d, self.cfg.kernel(which, G=G, J=J))
        io.save_csr(f, K)
        return K

    def patch_operator(self):
        d = self.cfg["dictionary"]
        return PatchOperator(d["patch_w"], d["stride"], self.geom.image_width,
                             self.geom.image_height)

    def dictionary(self, data, G=None, require_cached=False):
        """Coefficient-space atoms ``D_a`` for the given kernel order."""
        G = self.cfg["kernel_b"]["G"] if G is None else G
        d = self.cfg["dictionary"]
        parts = {"dict": d, "kb": self._kernel_key("kernel_b", G, None, data)}
        if d["map_kernel"]:
            parts["ka"] = self._kernel_key("kernel_a", G, None, data)
        key = stable_hash(parts)
        fa = self._cache(f"dictionary-G{G}", key, ".dict")
        fb = self._cache(f"dictionary_b-G{G}", key, ".dict")
        if fa.exists():
            log.info("cache hit: dictionary (G=%d)", G)
            return io.read_dictionary(fa)[0]
        if require_cached:
            raise MissingCacheError(f"dictionary (G={G}) is not built; run the 'build' command first")
        op = self.patch_operator()
        K_Mb = self.kernel(data, "kernel_b", G)
        B = build_learning_data(K_Mb, data.priors, op, d["n_train_patches"], d["dl_seed"])
        log.info("learning dictionary (G=%d) on %d patches", G, B.shape[1])
        D_b = ksvd_learn(B, d["S"], d["sparsity_s"], d["dl_iters"], d["dl_seed"])
        io.write_dictionary(fb, D_b.atoms, op.patch_w)
        if d["map_kernel"]:
            K_Ma = self.kernel(data, "kernel_a", G)
            K_tilde = factorize(K_Ma, K_Mb, dense=True)
            D_a = map_dictionary(local_operator(K_tilde, op), D_b, op)
        else:
            D_a = map_dictionary(None, D_b, op)
        io.write_dictionary(fa, D_a.atoms, op.patch_w)
        return D_a.atoms

    def laplacian(self, data, require_cached=False):
        key = stable_hash({"graph": self.cfg["graph"], "priors": data.priors_hash})
        f = self._cache("graph", key)
        spec = self.cfg.graph
        if f.exists():
            log.info("cache hit: graph")
            arrs = io.load_arrays(f)
            Z = CSRMatrix(arrs["indptr"], arrs["indices"], arrs["data"],
                          tuple(arrs["shape"]), check=False)
            return LaplacianPack(Z, int(arrs["t"]), None, spec.symmetrize_Q)
        if require_cached:
            raise MissingCacheError("graph Laplacian is not built; run the 'build' command first")
        pack = build_laplacian(data.priors_2d, None, spec)
        io.save_arrays(f, indptr=pack.Z.indptr, indices=pack.Z.indices, data=pack.Z.data,
                       shape=np.array(pack.Z.shape), t=np.array(pack.t))
        return pack

    def operators(self, algorithm, data, J=None, require_cached=False):
        """Keyword arguments for :func:`recon.run` for one algorithm."""
        if algorithm not in KERNEL_ALGOS:
            return {}
        G = self.cfg["kernel_a"]["G"] if algorithm == "mkrem" else 1
        K = self.kernel(data, "kernel_a", G, J, require_cached)
        if algorithm == "kem":
            return {"K": K}
        rc = self.cfg.recon(algorithm)
        ops = {"K": K}
        if rc.beta1 > 0:
            Gb = self.cfg["kernel_b"]["G"] if algorithm == "mkrem" else 1
            atoms = self.dictionary(data, Gb, require_cached)
            ops["coder"] = SparseCoder(atoms, self.patch_operator(),
                                       self.cfg["dictionary"]["sparsity_s"])
        if rc.beta2 > 0:
            ops["laplacian"] = replace(self.laplacian(data, require_cached), K=K)
        return ops

    def build(self, data, algorithms=None, J=None):
        """Build (or load) every artifact the algorithms need."""
        for algo in algorithms or self.cfg.algorithms:
            self.operators(algo, data, J)
        return self

    # -- reconstruction -----------------------------------------------------

    def reconstruct(self, data, algorithm, J=None, require_cached=False, config=None):
        """Run every realization; returns ``(iterations, traces)`` with traces
        shaped ``(O, R, M)``."""
        rc = config or self.cfg.recon(algorithm)
        ops = self.operators(algorithm, data, J, require_cached)

        def one(p):
            return run(data.model, p, rc, image_shape=(data.height, data.width), **ops)

        workers = self.cfg["workers"]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(one, data.sinograms))
        else:
            results = [one(p) for p in data.sinograms]
        return results[0].iterations, np.stack([r.trace for r in results])

    def write_traces(self, algorithm, traces, width, height):
        out = []
        for i, tr in enumerate(traces):
            out.append(self.path("recon", algorithm, f"trace_{i:03d}.f64"))
            io.write_image(out[-1], tr, width, height)
            out.append(self.path("recon", algorithm, f"final_{i:03d}.f64"))
            io.write_image(out[-1], tr[-1], width, height)
        return out

    def load_traces(self, algorithm):
        d = self.path("recon", algorithm)
        n = self.cfg["noise"]["n_realizations"]
        files = [d / f"trace_{i:03d}.f64" for i in range(n)]
        missing = [f for f in files if not f.exists()]
        if missing:
            raise MissingCacheError(f"no reconstruction for {algorithm} in {d}; "
                                    "run the 'reconstruct' command first")
        return np.stack([io.read_image(f)[0] for f in files])

    # -- reporting ----------------------------------------------------------

    def recorded_iterations(self):
        rc = self.cfg["recon"]
        n = rc["n_iters"] // rc["record_every"]
        return np.arange(1, n + 1) * rc["record_every"]

    def report(self, data, ensembles):
        """Write CSV tables, renders and the MSE sidecar; returns file paths."""
        f = data.reference
        w, h = data.width, data.height
        iters = self.recorded_iterations()
        rep = self.cfg["report"]
        bv_iters = set(range(rep["bias_variance_start"], rep["bias_variance_stop"] + 1,
                             rep["bias_variance_step"]))
        row = rep["profile_row"]
        if row < 0:
            ys = np.flatnonzero(data.lesion_mask) // w
            row = int(np.round(ys.mean())) if ys.size else h // 2

        mse_rows, amse_rows, bv_rows, prof_rows, summary = [], [], [], [], []
        prof_rows += [("reference", j, v) for j, v in enumerate(line_profile(f, w, row))]
        out = []
        vmax = float(f.max())
        for algo, E in ensembles.items():
            curves = mse_curves(E, f)
            for i, c in enumerate(curves):
                mse_rows += [(algo, i, int(it), v) for it, v in zip(iters, c)]
            amse = amse_curve(E, f)
            amse_rows += [(algo, int(it), v) for it, v in zip(iters, amse)]
            for k, it in enumerate(iters):
                if int(it) in bv_iters:
                    b, var = bias_variance_curve(E[:, k], f)
                    bv_rows.append((algo, int(it), b[0], var[0]))
            best, k = mmse(amse)
            img = E[0, k]
            prof_rows += [(algo, j, v) for j, v in enumerate(line_profile(img, w, row))]
            out.append(self.path("report", "images", f"{algo}.pgm"))
            io.write_pgm(out[-1], img, w, h, 0.0, vmax)
            summary.append(f"{algo} iteration={int(iters[k])} amse={best!r} "
                           f"mse_realization0={float(curves[0, k])!r}")
        out.append(self.path("report", "images", "reference.pgm"))
        io.write_pgm(out[-1], f, w, h, 0.0, vmax)
        out.append(self.path("report", "images", "mse.txt"))
        io.atomic_write(out[-1], "\n".join(summary) + "\n")

        tables = [("mse.csv", ("algorithm", "realization", "iteration", "mse"), mse_rows),
                  ("amse.csv", ("algorithm", "iteration", "amse"), amse_rows),
                  ("bias_variance.csv", ("algorithm", "iteration", "bias", "variance"), bv_rows),
                  ("profiles.csv", ("image", "column", "value"), prof_rows)]
        for name, header, rows in tables:
            out.append(self.path("report", name))
            io.write_csv(out[-1], header, rows)
        return out

    def sweep(self, data, J_values=None, algorithms=None):
        """Minimum AMSE per algorithm and window size ``J_a``."""
        rep = self.cfg["report"]
        J_values = J_values or rep["sweep_J"]
        algorithms = algorithms or rep["sweep_algorithms"]
        iters = self.recorded_iterations()
        rows = []
        for algo in algorithms:
            for J in J_values:
                _, E = self.reconstruct(data, algo, J=J)
                best, k = mmse(amse_curve(E, data.reference))
                rows.append((algo, int(J), best, int(iters[k])))
                log.info("sweep %s J_a=%d: ammse %.5f at iteration %d", algo, J, best, iters[k])
        path = self.path("report", "mmse_vs_Ja.csv")
        io.write_csv(path, ("algorithm", "J_a", "ammse", "iteration"), rows)
        return rows, [path]

    # -- manifest -----------------------------------------------------------

    def update_manifest(self, command, inputs, outputs):
        path = self.path("manifest.json")
        manifest = json.loads(path.read_text()) if path.exists() else {"runs": {}}
        manifest["config_hash"] = stable_hash(self.cfg.raw)
        manifest["seed"] = self.cfg.seed
        rel = lambda p: str(Path(p).relative_to(self.root)) if Path(p).is_relative_to(self.root) else str(p)
        manifest["runs"][command] = {
            "inputs": {rel(p): io.sha256_file(p) for p in inputs if Path(p).exists()},
            "outputs": {rel(p): io.sha256_file(p) for p in outputs if Path(p).exists()},
        }
        io.atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path
