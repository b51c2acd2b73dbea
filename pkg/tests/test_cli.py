import csv
import json
import logging

import numpy as np
import pytest

from mkrem import io
from mkrem.cli import build_parser, main

SMALL = """
[geometry]
image_width = 16
image_height = 16
n_angles = 12
n_radial = 23

[noise]
n_realizations = {O}
target_counts = 5000.0

[kernel_a]
J = 5

[dictionary]
patch_w = 3
S = 12
sparsity_s = 3
dl_iters = 3
n_train_patches = 60

[graph]
knn_graph = 16
eps_t = 1e-3

[recon]
n_iters = 6
record_every = 2

[recon.krem]
beta1 = 0.4
beta2 = 5.0

[recon.mkrem]
beta1 = 0.4
beta2 = 5.0

[report]
bias_variance_start = 2
bias_variance_stop = 6
bias_variance_step = 2
sweep_J = [3, 5]
"""


def write_config(tmp_path, O=3, extra=""):
    f = tmp_path / "cfg.toml"
    f.write_text(SMALL.format(O=O) + extra)
    return str(f)


def cli(cfg, out, *args):
    cmd, *rest = args
    return main([cmd, "-c", cfg, "-o", str(out), *rest])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for name in ("phantom", "build", "reconstruct", "report", "sweep", "demo"):
        assert name in text


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, extra="\n[recon.mkrem2]\nbeta1 = 1.0\n")
    assert cli(cfg, tmp_path / "o", "phantom") == 1
    assert "config error" in capsys.readouterr().err


def test_missing_data_exit_code(tmp_path):
    assert cli(write_config(tmp_path), tmp_path / "o", "reconstruct", "-a", "mlem") == 2


def test_phantom_files_deterministic(tmp_path):
    cfg = write_config(tmp_path, O=10)
    assert cli(cfg, tmp_path / "a", "phantom") == 0
    assert cli(cfg, tmp_path / "b", "phantom") == 0
    names = sorted(p.name for p in (tmp_path / "a" / "data").iterdir())
    assert len([n for n in names if n.startswith("sinogram_")]) == 10
    for n in names:
        assert (tmp_path / "a" / "data" / n).read_bytes() == (tmp_path / "b" / "data" / n).read_bytes()
    sino, w, h = io.read_image(tmp_path / "a" / "data" / "sinogram_000.f64")
    assert (w, h) == (23, 12) and sino.size == w * h
    ref, w, h = io.read_image(tmp_path / "a" / "data" / "activity.f64")
    assert (w, h) == (16, 16)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert "data/sinogram_009.f64" in manifest["runs"]["phantom"]["outputs"]


def test_pipeline_stages(tmp_path, caplog):
    cfg = write_config(tmp_path)
    out = tmp_path / "o"
    assert cli(cfg, out, "phantom") == 0
    # maximum-likelihood methods need no kernel artifacts
    assert cli(cfg, out, "reconstruct", "-a", "mlem") == 0
    assert not (out / "cache").exists() or not list((out / "cache").glob("kernel*"))
    tr, w, h = io.read_image(out / "recon" / "mlem" / "trace_000.f64")
    assert tr.shape == (6 // 2, 256)
    # regularized methods refuse to run before build
    assert cli(cfg, out, "reconstruct", "-a", "mkrem") == 2

    assert cli(cfg, out, "build") == 0
    K = io.load_csr(next((out / "cache").glob("kernel_a-G2-*.npz")))
    assert K.n_rows == 256
    caplog.clear()
    with caplog.at_level(logging.INFO, logger="mkrem"):
        assert cli(cfg, out, "build") == 0
    built = [r.getMessage() for r in caplog.records if r.getMessage().startswith("building")]
    hits = [r.getMessage() for r in caplog.records if r.getMessage().startswith("cache hit")]
    assert not built and hits

    assert cli(cfg, out, "reconstruct") == 0
    for algo in ("mlem", "mlem_f", "kem", "krem", "mkrem"):
        for i in range(3):
            tr, *_ = io.read_image(out / "recon" / algo / f"trace_{i:03d}.f64")
            assert tr.shape == (3, 256) and np.all(tr >= 0)

    assert cli(cfg, out, "report") == 0
    rep = out / "report"
    amse = read_csv(rep / "amse.csv")
    assert amse[0] == ["algorithm", "iteration", "amse"]
    assert len(amse) - 1 == 5 * 3
    assert read_csv(rep / "mse.csv")[0] == ["algorithm", "realization", "iteration", "mse"]
    bv = read_csv(rep / "bias_variance.csv")
    assert bv[0] == ["algorithm", "iteration", "bias", "variance"]
    assert [r[1] for r in bv[1:4]] == ["2", "4", "6"]
    assert read_csv(rep / "profiles.csv")[0] == ["image", "column", "value"]
    assert (rep / "images" / "mkrem.pgm").exists()
    assert "mkrem iteration=" in (rep / "images" / "mse.txt").read_text()

    assert cli(cfg, out, "sweep", "-a", "kem", "mkrem") == 0
    rows = read_csv(rep / "mmse_vs_Ja.csv")
    assert rows[0] == ["algorithm", "J_a", "ammse", "iteration"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("kem", "3"), ("kem", "5"),
                                                ("mkrem", "3"), ("mkrem", "5")]


def test_changing_window_invalidates_kernel(tmp_path):
    out = tmp_path / "o"
    cfg = write_config(tmp_path)
    assert cli(cfg, out, "phantom") == 0
    assert cli(cfg, out, "build", "-a", "kem") == 0
    assert cli(cfg, out, "reconstruct", "-a", "kem") == 0
    cfg2 = write_config(tmp_path, extra="")
    text = open(cfg2).read().replace("J = 5", "J = 7")
    open(cfg2, "w").write(text)
    assert cli(cfg2, out, "reconstruct", "-a", "kem") == 2
    assert cli(cfg2, out, "build", "-a", "kem") == 0
    assert len(list((out / "cache").glob("kernel_a-G1-*.npz"))) == 2


def test_report_without_traces(tmp_path):
    cfg = write_config(tmp_path)
    assert cli(cfg, tmp_path / "o", "phantom") == 0
    assert cli(cfg, tmp_path / "o", "report", "-a", "kem") == 2


@pytest.mark.filterwarnings("ignore:power criterion")
def test_demo_small(tmp_path):
    out = tmp_path / "d"
    assert main(["demo", "-o", str(out), "--size", "16", "--realizations", "2",
                 "--iters", "4"]) == 0
    assert (out / "report" / "amse.csv").exists()
    assert len(read_csv(out / "report" / "amse.csv")) == 1 + 5 * 4
