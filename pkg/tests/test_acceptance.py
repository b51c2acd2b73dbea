"""Acceptance criteria 1-12 on the 64x64 low-count study.

Each test ends with one ``criterion N: PASS|FAIL`` line, collected in the
terminal summary. The regularized methods use strengths tuned on a separate
noise seed (see README); the demo keeps the default strengths.
"""

import time
import warnings
from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest

from mkrem.cli import main
from mkrem.config import load_config
from mkrem.dictionary import build_learning_data, ksvd_learn, omp
from mkrem.graph import build_laplacian
from mkrem.linalg import CSRMatrix, matvec, matvec_transpose, spmm
from mkrem.metrics import amse_curve, mmse
from mkrem.pipeline import Experiment
from mkrem.projector import backproject, project
from mkrem.recon import ReconConfig, kem_step, mkrem_step, poisson_loglik, run

from conftest import ACCEPTANCE, planted_problem, random_sparse

TUNED = {"beta1": 0.4, "beta2": 17.0}
SWEEP_J = (9, 15, 21, 27)
CHUNK = 150

# smallest value over every image recorded by this module, for criterion 10
RECORDED_MIN = {}


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def observe(name, images):
    RECORDED_MIN[name] = min(RECORDED_MIN.get(name, np.inf), float(np.min(images)))


class Ensemble:
    """All realizations of one algorithm, extendable in place."""

    def __init__(self, exp, data, algo, J=None):
        self.data = data
        self.rc = exp.cfg.recon(algo)
        self.ops = exp.operators(algo, data, J)
        self.finals = [None] * len(data.sinograms)
        self.traces = np.empty((len(data.sinograms), 0, data.model.n_voxels))
        self.name = f"{algo}" + (f"-J{J}" if J else "")

    @property
    def n_iters(self):
        return self.traces.shape[1]

    def advance(self, to):
        extra = to - self.n_iters
        if extra <= 0:
            return self
        rc = replace(self.rc, n_iters=extra, record_every=1)
        shape = (self.data.height, self.data.width)
        new = []
        for i, p in enumerate(self.data.sinograms):
            res = run(self.data.model, p, rc, image_shape=shape, start=self.finals[i],
                      offset=self.n_iters, **self.ops)
            self.finals[i] = res.a
            new.append(res.trace)
        self.traces = np.concatenate([self.traces, np.stack(new)], axis=1)
        observe(self.name, self.traces[:, -extra:])
        return self

    def amse(self):
        return amse_curve(self.traces, self.data.reference)

    def settle(self, limit=600):
        """Iterate until the AMSE minimum is interior (or ``limit`` is hit)."""
        self.advance(CHUNK)
        while np.argmin(self.amse()) == self.n_iters - 1 and self.n_iters < limit:
            self.advance(self.n_iters + CHUNK // 2)
        return mmse(self.amse())


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    cfg = load_config(None, {"output_dir": str(out), "recon": {"krem": TUNED, "mkrem": TUNED}})
    exp = Experiment(cfg)
    return exp, exp.simulate()


@pytest.fixture(scope="module")
def fig6(study):
    exp, data = study
    t0 = time.perf_counter()
    runs = {}
    for algo in ("mlem_f", "kem", "krem", "mkrem"):
        runs[algo] = Ensemble(exp, data, algo)
        runs[algo].settle()
    return runs, time.perf_counter() - t0


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_01_reduction_identities(study):
    exp, data = study
    p = data.sinograms[0]
    K1 = exp.kernel(data, "kernel_a", G=1)
    lap = replace(exp.laplacian(data), K=K1)
    n = 30
    kem = run(data.model, p, ReconConfig("kem", n), K=K1).trace
    mk = run(data.model, p, ReconConfig("mkrem", n), K=K1, laplacian=lap).trace
    # one explicit step with the Laplacian attached but switched off
    a = np.random.default_rng(0).random(K1.n_cols) + 0.5
    step_mk = mkrem_step(data.model, K1, a, p, None, lap, 0.0, 0.0)
    step_kem = kem_step(data.model, K1, a, p)
    I = CSRMatrix.identity(data.model.n_voxels)
    kem_i = run(data.model, p, ReconConfig("kem", n), K=I).trace
    ml = run(data.model, p, ReconConfig("mlem", n)).trace
    observe("c1", np.stack([kem, mk, kem_i, ml]))

    def rel(u, v):
        return float(np.max(np.abs(u - v) / np.maximum(np.abs(v), np.finfo(float).tiny)))

    errs = [rel(mk, kem), rel(step_mk, step_kem), rel(kem_i, ml)]
    verdict(1, max(errs) <= 1e-14,
            f"max rel diff MKREM(b=0,G=1)/KEM {errs[0]:.1e}, step {errs[1]:.1e}, "
            f"KEM(K=I)/MLEM {errs[2]:.1e}")


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_02_em_monotonicity(study):
    _, data = study
    p = data.sinograms[0]
    t0 = time.perf_counter()
    res = run(data.model, p, ReconConfig("mlem", 100))
    ll = np.array([poisson_loglik(data.model, np.ones(data.model.n_voxels), p)]
                  + [poisson_loglik(data.model, x, p) for x in res.trace])
    dt = time.perf_counter() - t0
    observe("c2", res.trace)
    drops = np.diff(ll) / np.abs(ll[:-1])
    ok = bool(np.all(drops >= -1e-9)) and dt < 10
    verdict(2, ok, f"worst relative step {drops.min():.2e} over 100 iterations, {dt:.1f}s")


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_03_adjoint_and_oracles(study):
    _, data = study
    rng = np.random.default_rng(3)
    x = rng.random(data.model.n_voxels)
    q = rng.random(data.model.n_bins)
    lhs, rhs = project(data.model, x) @ q, x @ backproject(data.model, q)
    adj = abs(lhs - rhs) / abs(lhs)
    worst = 0.0
    for _ in range(5):
        A, B = random_sparse(rng, 20, 20), random_sparse(rng, 20, 20)
        SA, SB = CSRMatrix.from_dense(A), CSRMatrix.from_dense(B)
        v = rng.standard_normal(20)
        worst = max(worst,
                    np.max(np.abs(matvec(SA, v) - A @ v)),
                    np.max(np.abs(matvec_transpose(SA, v) - A.T @ v)),
                    np.max(np.abs(spmm(SA, SB).to_dense() - A @ B)))
    verdict(3, adj <= 1e-10 and worst <= 1e-12,
            f"adjoint rel gap {adj:.1e}, worst sparse/dense gap {worst:.1e}")


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_04_omp_exactness():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    hits, over = 0, 0
    for _ in range(200):
        D, y, _sup = planted_problem(rng)
        c = omp(D, y, 2)
        over += np.count_nonzero(c) > 2
        best, best_r = None, np.inf
        for sup in combinations(range(12), 2):
            sub = D[:, sup]
            r = np.linalg.norm(y - sub @ np.linalg.lstsq(sub, y, rcond=None)[0])
            if r < best_r:
                best, best_r = set(sup), r
        hits += set(np.flatnonzero(c)) == best
    dt = time.perf_counter() - t0
    verdict(4, hits >= 190 and over == 0 and dt < 5,
            f"{hits}/200 supports recovered, {over} over-sparse codes, {dt:.1f}s")


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_05_ksvd_monotone(study):
    exp, data = study
    t0 = time.perf_counter()
    d = exp.cfg["dictionary"]
    K_Mb = exp.kernel(data, "kernel_b")
    B = build_learning_data(K_Mb, data.priors, exp.patch_operator(), d["n_train_patches"],
                            d["dl_seed"])
    D = ksvd_learn(B, d["S"], d["sparsity_s"], d["dl_iters"], d["dl_seed"])
    dt = time.perf_counter() - t0
    h = np.array(D.history)
    # with s >= 25 every patch is coded exactly, so later rounds sit at the
    # rounding floor of the data; rises are judged against that floor
    ulp = 64 * np.finfo(float).eps * np.linalg.norm(B)
    rise = float(np.max(np.diff(h)))
    # the same data with a binding sparsity must decrease strictly
    h4 = np.array(ksvd_learn(B, d["S"], 4, d["dl_iters"], d["dl_seed"]).history)
    strict = int(np.sum(np.diff(h4) > 0))
    ok = B.shape == (25, 400) and h.size == 50 and rise <= ulp and strict == 0 and dt < 60
    verdict(5, ok, f"data {B.shape}, {h.size} rounds, fit {h[0]:.3e} -> {h[-1]:.3e}, "
                   f"largest rise {rise:.1e} vs rounding floor {ulp:.1e}; "
                   f"s=4 run: {strict} rises; {dt:.1f}s")


# -- 6 ---------------------------------------------------------------------------------

def test_criterion_06_graph_invariants(study):
    exp, data = study
    K = exp.kernel(data, "kernel_a")
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        pack = build_laplacian(data.priors_2d, K, exp.cfg.graph)
    rows = float(np.max(np.abs(pack.Z.row_sums() - 1)))
    # dense route for Q = I - Z^t, independent of the matrix-free products
    Zd = pack.Z.to_dense()
    Q = np.eye(pack.n) - np.linalg.matrix_power(Zd, pack.t)
    one = np.ones(pack.n)
    q1 = max(float(np.max(np.abs(pack.apply_Q(one)))), float(np.max(np.abs(Q @ one))))
    rng = np.random.default_rng(6)
    Ks = K.to_scipy()
    gap = 0.0
    for _ in range(3):
        a = rng.random(pack.n)
        x = Ks @ a
        gap = max(gap, abs(pack.quadratic(a) - x @ Q @ x))
    ok = rows <= 1e-12 and q1 <= 1e-10 and gap <= 1e-10 and 1 <= pack.t <= exp.cfg.graph.t_max
    verdict(6, ok, f"row-sum err {rows:.1e}, |Q1|max {q1:.1e}, Q_a identity gap {gap:.1e}, "
                   f"t={pack.t}")


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_07_amse_ordering(fig6):
    runs, dt = fig6
    best = {a: mmse(e.amse()) for a, e in runs.items()}
    m = {a: v for a, (v, _) in best.items()}
    ok = m["mkrem"] < m["krem"] < m["kem"] < m["mlem_f"] and dt < 15 * 60
    detail = ", ".join(f"{a} {v:.5f}@{k + 1}" for a, (v, k) in best.items())
    verdict(7, ok, f"min AMSE {detail}; {dt / 60:.1f} min")


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_08_stability(study, fig6):
    exp, data = study
    runs, _ = fig6
    ratios = {}
    for algo, ens in (("mkrem", runs["mkrem"]), ("mlem", Ensemble(exp, data, "mlem"))):
        _, k = ens.settle()
        target = 5 * (k + 1)
        ens.advance(target)
        curve = ens.amse()
        ratios[algo] = (curve[target - 1] / curve[k], k + 1, target)
    ok = ratios["mkrem"][0] <= 1.15 and ratios["mlem"][0] >= 1.5
    detail = ", ".join(f"{a} min@{k} AMSE({t})/min = {r:.3f}" for a, (r, k, t) in ratios.items())
    verdict(8, ok, detail)


# -- 9 ---------------------------------------------------------------------------------

def test_criterion_09_window_sensitivity(study, fig6):
    exp, data = study
    runs, _ = fig6
    ammse = {}
    for algo in ("kem", "mkrem"):
        vals = []
        for J in SWEEP_J:
            ens = runs[algo] if J == exp.cfg["kernel_a"]["J"] else Ensemble(exp, data, algo, J)
            vals.append(ens.settle()[0])
        ammse[algo] = np.array(vals)
    spread = {a: float((v.max() - v.min()) / v.min()) for a, v in ammse.items()}
    detail = "; ".join(f"{a} AMMSE {np.round(v, 5).tolist()} spread {spread[a]:.3f}"
                       for a, v in ammse.items())
    verdict(9, spread["mkrem"] < spread["kem"], detail)


# -- 11 --------------------------------------------------------------------------------

def test_criterion_11_demo_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        args = ["demo", "-o", str(tmp_path / name), "--seed", "0", "--size", "32",
                "--realizations", "2", "--iters", "15"]
        assert main(args) == 0
        outs.append(tmp_path / name / "report")
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    same = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    for algo in ("mlem", "mlem_f", "kem", "krem", "mkrem"):
        for f in (tmp_path / "a" / "recon" / algo).glob("trace_*.f64"):
            observe(f"demo-{algo}", np.frombuffer(f.read_bytes().split(b"\n", 1)[1], "<f8"))
    verdict(11, len(names) >= 4 and same == names,
            f"{len(same)}/{len(names)} CSV files byte-identical ({', '.join(names)})")


# -- 12 --------------------------------------------------------------------------------

def test_criterion_12_performance(tmp_path):
    # default strengths, fresh caches: building the operators is timed too
    exp = Experiment(load_config(None, {"output_dir": str(tmp_path), "noise": {"n_realizations": 1}}))
    data = exp.simulate()
    t0 = time.perf_counter()
    ops = exp.operators("mkrem", data)
    t_build = time.perf_counter() - t0
    res = run(data.model, data.sinograms[0], replace(exp.cfg.recon("mkrem"), n_iters=40), **ops)
    dt = time.perf_counter() - t0
    observe("c12", res.trace)
    verdict(12, dt < 60 and "coder" in ops and "laplacian" in ops,
            f"MKREM 40 iterations incl. operator build {dt:.1f}s (build {t_build:.1f}s)")


# -- 10 --------------------------------------------------------------------------------

def test_criterion_10_nonnegativity():
    # runs last in this module so every recorded image above has been seen
    worst = min(RECORDED_MIN.values()) if RECORDED_MIN else np.nan
    verdict(10, len(RECORDED_MIN) >= 10 and worst >= 0,
            f"{len(RECORDED_MIN)} image sets checked, smallest value {worst:.3e}")
