import csv
import os

import numpy as np
import pytest

from diopt.checkpoint import load_checkpoint
from diopt.cli import main
from diopt.diffusion import sample_batch
from diopt.evaluation import metrics
from diopt.problems import complete, load_dataset
from diopt.trainer import read_epoch_log

SMALL = ["--set", "N=6", "--set", "hidden=32", "--set", "t_hidden=32", "--set", "batch_size=16",
         "--set", "K_t=4", "--set", "K=4", "--set", "val_count=10", "--set", "base_hidden=32",
         "--set", "base_epochs=3", "--set", "n=6", "--set", "n_eq=2", "--set", "n_ineq=6"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("DIOPT_OUT", str(tmp_path))
    return tmp_path


@pytest.fixture
def qp(out):
    assert main(["generate", "--kind", "qp", "--n", "6", "--n-eq", "2", "--n-ineq", "6",
                 "--count", "30", "--seed", "4"]) == 0
    path = str(out / "qp.ds")
    assert main(["label", path]) == 0
    return path


def test_generate_toy(out):
    assert main(["generate", "--kind", "toy2d", "--count", "5"]) == 0
    ds = load_dataset(out / "toy2d.ds")
    assert (ds.family.n, ds.family.n_eq) == (2, 0) and len(ds) == 5
    manifest = (out / "manifest.txt").read_text()
    assert "config_hash" in manifest and "sha256:" in manifest


def test_generate_bitwise_reproducible(out):
    args = ["generate", "--kind", "qp", "--n", "8", "--n-eq", "3", "--n-ineq", "5", "--count", "7",
            "--seed", "2"]
    main(args + ["-o", str(out / "a.ds")])
    main(args + ["-o", str(out / "b.ds")])
    assert (out / "a.ds").read_bytes() == (out / "b.ds").read_bytes()


def test_generate_empty(out):
    assert main(["generate", "--kind", "qp", "--count", "0", "-o", str(out / "e.ds")]) == 0
    assert len(load_dataset(out / "e.ds")) == 0


def test_label_idempotent(qp, out):
    first = open(qp, "rb").read()
    assert main(["label", qp, "-o", str(out / "again.ds")]) == 0
    assert (out / "again.ds").read_bytes() == first
    ds = load_dataset(qp)
    assert np.max(np.abs(ds.Y @ ds.family.A.T - ds.X)) <= 1e-6
    assert np.max(ds.Y @ ds.family.G.T - ds.family.h) <= 1e-6


def test_train_diffusion_has_no_bootstrap(qp, out):
    assert main(["train", "--method", "diffusion", qp] + SMALL) == 0
    log = read_epoch_log(out / "diffusion_epochs.csv")
    assert len(log) == 6 and {r.phase for r in log} == {"supervised"}


def test_train_diopt_phases(qp, out):
    assert main(["train", "--method", "diopt", qp] + SMALL + ["--set", "r_s=0.5"]) == 0
    log = read_epoch_log(out / "diopt_epochs.csv")
    assert [r.phase for r in log] == ["supervised"] * 3 + ["VIOLATION_ONLY", "FULL", "VIOLATION_ONLY"]


def test_train_bad_method(qp):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "magic", qp])
    assert exc.value.code == 2


def test_train_config_error_before_compute(qp, out):
    assert main(["train", "--method", "diopt", qp, "--set", "r_s=3"]) == 2
    assert not (out / "diopt.ckpt").exists()


def test_train_needs_labels(out):
    main(["generate", "--kind", "qp", "--count", "4", "-o", str(out / "u.ds")])
    assert main(["train", "--method", "mlp", str(out / "u.ds")] + SMALL) == 2


def test_eval_K1_is_single_sample(qp, out):
    main(["train", "--method", "diopt", qp] + SMALL)
    ck = str(out / "diopt.ckpt")
    assert main(["eval", qp, "--checkpoint", ck, "--K", "1", "-o", str(out / "k1.csv")]) == 0
    model, _ = load_checkpoint(ck)
    ds = load_dataset(qp)
    fam = ds.family
    Z = sample_batch(model, ds.X, 1, 1.0, np.random.default_rng([0, 100]))[:, 0]
    ref = metrics(fam, ds.X, complete(fam, Z, ds.X), ds.F).summary
    row = read_rows(out / "k1.csv")[0]
    assert float(row["Objective mean"]) == ref["Objective"][0]
    assert float(row["Feasibility% mean"]) == ref["Feasibility%"][0]


def test_eval_more_candidates_not_worse(qp, out):
    main(["train", "--method", "diopt", qp] + SMALL)
    ck = str(out / "diopt.ckpt")
    seeds = "0,1,2,3"
    main(["eval", qp, "--checkpoint", ck, "--K", "1", "--seeds", seeds, "-o", str(out / "a.csv")])
    main(["eval", qp, "--checkpoint", ck, "--K", "64", "--seeds", seeds, "-o", str(out / "b.csv")])
    a = read_rows(out / "a.csv")[-1]
    b = read_rows(out / "b.csv")[-1]
    se = float(a["Feasibility% std"]) / np.sqrt(4)
    assert float(b["Feasibility% mean"]) >= float(a["Feasibility% mean"]) - 2 * se
    assert a["seed"] == "all" and len(read_rows(out / "a.csv")) == 5


def test_eval_hash_mismatch(qp, out):
    main(["train", "--method", "diopt", qp] + SMALL)
    rc = main(["eval", qp, "--checkpoint", str(out / "diopt.ckpt")] + SMALL + ["--set", "seed=5"])
    assert rc == 3


def test_eval_mbd_without_checkpoint(qp, out):
    args = ["eval", qp, "--method", "mbd", "--set", "mbd_steps=10", "--set", "mbd_samples=16"]
    assert main(args) == 0
    rows = read_rows(out / "results_mbd.csv")
    assert rows[0]["method"] == "mbd" and float(rows[0]["Eq Max mean"]) <= 1e-8
    assert main(args + ["--no-completion", "-o", str(out / "nc.csv")]) == 0
    assert float(read_rows(out / "nc.csv")[0]["Eq Max mean"]) > 1e-3


def test_baseline_train_and_eval(qp, out):
    for m in ("dc3", "mlp"):
        assert main(["train", "--method", m, qp] + SMALL) == 0
        assert main(["eval", qp, "--checkpoint", str(out / f"{m}.ckpt")]) == 0
        assert read_rows(out / f"results_{m}.csv")[0]["method"] == m


def test_ablate_single_value_matches_train(qp, out):
    assert main(["ablate", qp, "--axis", "T", "--values", "5"] + SMALL) == 0
    assert main(["train", "--method", "diopt", qp] + SMALL) == 0
    a = (out / "diopt_T5_epochs.csv").read_text()
    b = (out / "diopt_epochs.csv").read_text()
    assert a == b


def test_ablate_K_rows(qp, out):
    assert main(["ablate", qp, "--axis", "K", "--values", "1,2,8"] + SMALL) == 0
    rows = read_rows(out / "ablate_K.csv")
    assert [r["value"] for r in rows] == ["1", "2", "8"]
    assert [r["K"] for r in rows] == ["1", "2", "8"]


def test_ablate_eta_zero_deterministic(qp, out):
    assert main(["ablate", qp, "--axis", "eta", "--values", "0", "--seeds", "0,1"] + SMALL) == 0
    model, _ = load_checkpoint(out / "diopt_eta0.0.ckpt")
    ds = load_dataset(qp)
    init = np.random.default_rng(0).standard_normal((len(ds), model.d_out))
    from diopt.diffusion import reverse_process
    a = reverse_process(model, ds.X, init, None, 0.0)
    b = reverse_process(model, ds.X, init.copy(), None, 0.0)
    assert np.array_equal(a, b)


def test_ablate_empty_values(qp):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", qp, "--axis", "T", "--values", ","])
    assert exc.value.code == 2


def test_verify_theorem1(out):
    assert main(["verify-theorem1", "--d", "1,2", "--points", "20000"]) == 0
    rows = read_rows(out / "theorem1.csv")
    assert [r["d"] for r in rows] == ["1", "2"]
    assert all(r["within_4se"] == "True" for r in rows)


def test_rerun_reproducible_csvs(qp, tmp_path):
    outs = []
    for tag in ("r1", "r2"):
        d = tmp_path / tag
        assert main(["train", "--method", "diopt", qp, "--out-dir", str(d)] + SMALL) == 0
        assert main(["eval", qp, "--checkpoint", str(d / "diopt.ckpt"), "--seeds", "0,1",
                     "--out-dir", str(d)]) == 0
        outs.append(d)
    for name in ("diopt_epochs.csv", "results_diopt.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
