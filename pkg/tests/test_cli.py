import csv
import json

import numpy as np
import pytest
import yaml

from socpath import cli


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


TRAIN_FREE = {
    "seed": 4,
    "model": {"kind": "free", "beta": 1.0},
    "grid": {"K": 16},
    "control": {"residual": "mlp", "hidden": [8]},
    "training": {"objective": "propagator", "x0": [0.0], "xT": [0.0], "K_train": 8, "epochs": 10,
                 "lr": 1e-3, "B_train": 16, "validate_every": 5, "B_eval": 128},
}

ROTOR = {"kind": "rotor", "N": 3, "J": 1.0, "beta": 1.0, "boundary": "periodic"}


@pytest.fixture(scope="module")
def rotor_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("rotor")
    cfg = {
        "seed": 2, "model": ROTOR, "grid": {"K": 8}, "control": {"hidden": 4},
        "training": {"epochs": 2, "K_train": 4, "B_train": 8, "M_train": 4, "validate_every": 1,
                     "B_eval": 16, "M_eval": 8},
    }
    cli.run_command("train", cfg, out)
    return str(out / "checkpoint.json")


def test_train_free_particle(tmp_path, capsys):
    cfg = write(tmp_path, "c.yaml", TRAIN_FREE)
    code, out, _ = run(capsys, "train", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 0
    summary = json.loads(out)["summary"]
    assert summary["validation_rows"] == 3 and summary["seed"] == 4
    o = tmp_path / "o"
    for f in ("checkpoint.json", "curve.csv", "train.json", "resolved_config.yaml"):
        assert (o / f).exists()
    assert len([r for r in rows(o / "curve.csv") if r["fine_loss"]]) > 0
    # V = 0: the bridge is already optimal, so the learned residual stays small
    from socpath.control import ControlFunction
    from socpath.nn.checkpoint import load_checkpoint

    ctrl = ControlFunction.from_checkpoint(load_checkpoint(o / "checkpoint.json"))
    x = np.linspace(-1, 1, 11)[:, None]
    assert np.max(np.abs(ctrl.residual_drift(x, 0.5, np.zeros_like(x)))) < 0.05


def test_snapshot_reproduces_run(tmp_path, capsys):
    doc = {"seed": 9, "model": {"kind": "anharmonic", "lam": 1.0, "beta": 1.0}, "grid": {"K": 16},
           "control": {"residual": "none"},
           "estimator": {"kind": "propagator", "x0": [0.0], "xT": [0.0], "B": 200}}
    a = tmp_path / "a"
    assert run(capsys, "sample", "--config", write(tmp_path, "c.yaml", doc), "--out", str(a))[0] == 0
    b = tmp_path / "b"
    assert run(capsys, "sample", "--config", str(a / "resolved_config.yaml"), "--out", str(b))[0] == 0
    ra, rb = rows(a / "estimates.csv"), rows(b / "estimates.csv")
    assert [r["value"] for r in ra] == [r["value"] for r in rb]


def test_sample_free_kernel_and_bound(tmp_path, capsys):
    doc = {"model": {"kind": "free", "beta": 1.0}, "grid": {"K": 64},
           "estimator": {"kind": "propagator", "x0": [0.0], "xT": [0.0], "B": 2000},
           "control": {"residual": "none"}}
    code, _, _ = run(capsys, "sample", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path),
                     "--seed", "11", "--threads", "2")
    assert code == 0
    rs = rows(tmp_path / "estimates.csv")
    assert {r["quantity"] for r in rs} == {"log_propagator", "cost_bound"}
    assert all(r["seed"] == "11" and r["checkpoint_id"] == "bridge" for r in rs)
    direct = next(r for r in rs if r["quantity"] == "log_propagator")
    assert float(direct["K_estimate"]) == pytest.approx(0.39894, rel=0.01)
    side = json.loads((tmp_path / "estimates.json").read_text())
    assert side["bound"] >= -side["value"] - 3 * side["bound_std_error"]
    for key in ("model", "beta", "K", "eps", "seed", "checkpoint_id", "walltime"):
        assert key in side


def test_sample_rotor_free_energy_with_checkpoint(tmp_path, capsys, rotor_ckpt):
    doc = {"model": ROTOR, "grid": {"K": 8}, "control": {"checkpoint": rotor_ckpt},
           "estimator": {"kind": "free_energy", "M": 16, "B": 2}}
    code, out, _ = run(capsys, "sample", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path))
    assert code == 0
    rs = rows(tmp_path / "estimates.csv")
    assert [r["quantity"] for r in rs] == ["free_energy", "free_energy_variational"]
    assert all(r["checkpoint_id"] == json.loads(out)["summary"]["checkpoint_id"] for r in rs)
    assert float(rs[0]["per_particle"]) == pytest.approx(float(rs[0]["value"]) / 3)


def test_correlation_needs_rotor(tmp_path, capsys):
    doc = {"model": {"kind": "anharmonic", "lam": 1.0, "beta": 1.0}, "estimator": {"kind": "correlation"}}
    code, _, err = run(capsys, "sample", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path))
    assert code != 0
    e = json.loads(err.strip().splitlines()[-1])
    assert e["status"] == "error" and e["error"] == "ConfigurationError"
    assert (tmp_path / "error.json").exists()


def test_missing_field_names_it(tmp_path, capsys):
    doc = {"model": {"kind": "free"}}
    code, _, err = run(capsys, "sample", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path))
    assert code != 0
    assert json.loads(err.strip().splitlines()[-1])["field"] == "model.beta"


def test_unknown_key_is_an_error(tmp_path, capsys):
    doc = {"model": {"kind": "free", "beta": 1.0, "mass": 2.0}}
    code, _, err = run(capsys, "oracle", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path))
    assert code != 0
    assert json.loads(err.strip().splitlines()[-1])["field"] == "model.mass"


def test_benchmark_needs_two_runs(tmp_path, capsys):
    doc = {"model": ROTOR, "benchmark": {"runs": 1, "controls": ["bridge"]}}
    code, _, err = run(capsys, "benchmark", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path))
    assert code != 0
    assert json.loads(err.strip().splitlines()[-1])["field"] == "benchmark.runs"


def test_benchmark_traces_reproducible(tmp_path, capsys, rotor_ckpt):
    doc = {"seed": 5, "model": ROTOR, "grid": {"K": 8}, "control": {"checkpoint": rotor_ckpt},
           "benchmark": {"runs": 3, "M": 8, "B": 2, "warmup_paths": 4}}
    cfg = write(tmp_path, "c.yaml", doc)
    assert run(capsys, "benchmark", "--config", cfg, "--out", str(tmp_path / "a"))[0] == 0
    assert run(capsys, "benchmark", "--config", cfg, "--out", str(tmp_path / "b"))[0] == 0
    ta, tb = rows(tmp_path / "a" / "traces.csv"), rows(tmp_path / "b" / "traces.csv")
    assert [r["F_running"] for r in ta] == [r["F_running"] for r in tb]
    assert set(ta[0]) >= {"control", "run", "seed", "checkpoint_id", "paths", "walltime", "F_running"}
    assert len(ta) == 2 * 3 * 8
    spread = rows(tmp_path / "a" / "spread.csv")
    assert {r["control"] for r in spread} == {"bridge", "checkpoint"}
    side = json.loads((tmp_path / "a" / "benchmark.json").read_text())
    assert len(side["std_ratio"]) == 8 and side["std_ratio_max_after_warmup"] > 0


def test_extrapolate_rows_and_degenerate_case(tmp_path, capsys, rotor_ckpt):
    doc = {"seed": 3, "model": ROTOR, "grid": {"K": 8}, "control": {"checkpoint": rotor_ckpt},
           "extrapolate": {"N_eval": [3, 5], "M": 8, "B": 2}}
    code, _, _ = run(capsys, "extrapolate", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path / "x"))
    assert code == 0
    rs = rows(tmp_path / "x" / "extrapolate.csv")
    assert [int(r["N_eval"]) for r in rs] == [3, 5]
    assert all(r["N_train"] == "3" for r in rs)
    # N_eval = N_train is an ordinary free-energy run
    same = {"seed": 3, "model": ROTOR, "grid": {"K": 8}, "control": {"checkpoint": rotor_ckpt},
            "estimator": {"kind": "free_energy", "M": 8, "B": 2}}
    run(capsys, "sample", "--config", write(tmp_path, "s.yaml", same), "--out", str(tmp_path / "s"))
    direct = rows(tmp_path / "s" / "estimates.csv")[0]
    assert float(rs[0]["direct"]) == pytest.approx(float(direct["per_particle"]))


def test_extrapolate_rejects_mlp(tmp_path, capsys):
    train_doc = dict(TRAIN_FREE, training=dict(TRAIN_FREE["training"], epochs=1, validate_every=1))
    cli.run_command("train", train_doc, tmp_path / "t")
    doc = {"model": ROTOR, "control": {"checkpoint": str(tmp_path / "t" / "checkpoint.json")},
           "extrapolate": {"N_eval": [5]}}
    code, _, err = run(capsys, "extrapolate", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path))
    assert code != 0
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ArchitectureError"


def test_oracle_standalone(tmp_path, capsys):
    doc = {"model": {"kind": "rotor", "N": 2, "J": 0.0, "beta": 5.0}, "oracle": {"m_max": 6}}
    code, out, _ = run(capsys, "oracle", "--config", write(tmp_path, "c.yaml", doc), "--out", str(tmp_path))
    assert code == 0
    res = json.loads(out)["summary"]["result"]
    assert res["free_energy_per_particle"] == pytest.approx(-0.03042, abs=1e-5)
    r = {x["quantity"]: x for x in rows(tmp_path / "oracle.csv")}
    assert "free_energy" in r and r["free_energy"]["seed"] == "0"
