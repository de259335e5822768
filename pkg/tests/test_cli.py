import configparser
import csv
import zipfile

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from frugalflows import io as ffio
from frugalflows.cli import main
from frugalflows.data import Dataset
from frugalflows.errors import ParseError, SchemaError, VersionError

FAST_TRAIN = """
[train]
learning_rate = 0.01
max_epochs = 40
patience = 10
flow_layers = 1
knots = 5
nn_width = 8
nn_depth = 1
"""


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root / "fit.ini", FAST_TRAIN + "\n[dgp]\nname = m2\nn = 600\n\n[schema]\ndiscrete = z2, z4\n")
    assert main(["simulate-dgp", "--config", str(cfg), "--seed", "1", "--out", str(root / "m2.csv")]) == 0
    assert main(["fit", str(root / "m2.csv"), "--config", str(cfg), "--out", str(root / "model")]) == 0
    return root, cfg


def test_read_table_errors(tmp_path):
    with pytest.raises(ParseError, match=r"bad.csv:3"):
        ffio.read_table(write(tmp_path / "bad.csv", "z1,t,y\n1,0,2\n1,x,2\n"))
    with pytest.raises(ParseError, match=r":2: expected 3 fields"):
        ffio.read_table(write(tmp_path / "short.csv", "z1,t,y\n1,0\n"))
    with pytest.raises(ParseError, match="missing value"):
        ffio.read_table(write(tmp_path / "na.csv", "z1,t,y\n1,0,NA\n"))
    with pytest.raises(ParseError, match="empty file"):
        ffio.read_table(write(tmp_path / "empty.csv", ""))
    with pytest.raises(ParseError, match="duplicate"):
        ffio.read_table(write(tmp_path / "dup.csv", "a,a,t\n"))


def test_schema_errors(tmp_path):
    path = write(tmp_path / "d.csv", "z1,treat,y\n0.5,0,1\n0.2,1,3\n")
    with pytest.raises(SchemaError, match="'t' missing"):
        ffio.read_dataset(path)
    cp = ffio.read_config(text="[schema]\ntreatment = treat\ndiscrete = z9\n")
    with pytest.raises(SchemaError, match="z9"):
        ffio.read_dataset(path, cp)
    cp = ffio.read_config(text="[schema]\ntreatment = treat\ncontinuous = z1\n")
    ds = ffio.read_dataset(path, cp)
    assert ds.z_kinds == ("continuous",)
    with pytest.raises(SchemaError, match="0/1"):
        ffio.read_dataset(write(tmp_path / "t2.csv", "z1,treat,y\n0.5,2,1\n"), cp)


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(30, 2)), (rng.random(30) < 0.5).astype(float), rng.normal(size=30),
                 ("a", "b"), ("continuous", "continuous"))
    ffio.write_dataset(tmp_path / "x.csv", ds)
    back = ffio.read_dataset(tmp_path / "x.csv", ffio.read_config(text="[schema]\ncontinuous = a, b\n"))
    assert_array_equal(back.z, ds.z)
    assert_array_equal(back.y, ds.y)


def test_model_container(tmp_path):
    payload = {"a": np.arange(3.0), "b": {"c": [np.eye(2), np.ones(1)], "d": 1.5}, "e": "x"}
    digest = ffio.save_payload(tmp_path / "m.ffm", payload)
    assert digest == ffio.file_sha256(tmp_path / "m.ffm")
    assert ffio.model_bytes(payload) == (tmp_path / "m.ffm").read_bytes()
    back = ffio.load_payload(tmp_path / "m.ffm")
    assert_array_equal(back["b"]["c"][0], np.eye(2))
    assert back["b"]["d"] == 1.5 and back["e"] == "x"


def test_model_container_version_checks(tmp_path):
    with zipfile.ZipFile(tmp_path / "old.ffm", "w") as zf:
        zf.writestr("meta.json", '{"magic": "frugalflows-model", "format_version": 99, "payload": {}}')
    with pytest.raises(VersionError, match="99"):
        ffio.load_payload(tmp_path / "old.ffm")
    write(tmp_path / "junk.ffm", "not a zip")
    with pytest.raises(VersionError):
        ffio.load_payload(tmp_path / "junk.ffm")


def test_fit_outputs(workspace):
    root, _ = workspace
    assert (root / "model" / "model.ffm").exists()
    rows = read_csv(root / "model" / "loss.csv")
    assert rows[0] == ["epoch", "train_loss", "val_loss"]
    assert len(rows) > 2


def test_refit_is_byte_identical(workspace, tmp_path):
    root, cfg = workspace
    assert main(["fit", str(root / "m2.csv"), "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.ffm").read_bytes() == (root / "model" / "model.ffm").read_bytes()


def test_generate_is_reproducible_and_sidecar_round_trips(workspace, tmp_path):
    root, _ = workspace
    spec = write(tmp_path / "bench.ini", "[benchmark]\nn = 200\nseed = 3\nrho = 0.3\ntau = 2.0\n")
    model = str(root / "model" / "model.ffm")
    for out in ("a", "b"):
        assert main(["generate", model, "--config", str(spec), "--out", str(tmp_path / out)]) == 0
    a = (tmp_path / "a" / "benchmark.csv").read_bytes()
    assert a == (tmp_path / "b" / "benchmark.csv").read_bytes()
    meta = configparser.ConfigParser()
    meta.read(tmp_path / "a" / "benchmark.meta.ini")
    assert meta["meta"]["model_sha256"] == ffio.file_sha256(model)
    assert_allclose(float(meta["meta"]["generation_ate"]), 2.0, rtol=1e-14)
    assert main(["generate", model, "--config", str(tmp_path / "a" / "benchmark.meta.ini"),
                 "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "benchmark.csv").read_bytes() == a


def test_generate_rejects_empty_benchmark(workspace, tmp_path, capsys):
    root, _ = workspace
    spec = write(tmp_path / "bench.ini", "[benchmark]\nn = 0\n")
    code = main(["generate", str(root / "model" / "model.ffm"), "--config", str(spec), "--out", str(tmp_path)])
    assert code == 2
    assert "at least 1" in capsys.readouterr().err


def test_evaluate_replicates(workspace, tmp_path):
    root, _ = workspace
    spec = write(tmp_path / "bench.ini", "[benchmark]\nn = 300\nreplicates = 4\ntau = 1.0\n"
                 "propensity = randomized\np = 0.5\n")
    assert main(["generate", str(root / "model" / "model.ffm"), "--config", str(spec),
                 "--out", str(tmp_path / "gen")]) == 0
    files = sorted(str(p) for p in (tmp_path / "gen").glob("benchmark_*.csv"))
    assert len(files) == 4
    assert main(["evaluate", *files, "--out", str(tmp_path / "est.csv")]) == 0
    rows = read_csv(tmp_path / "est.csv")
    assert rows[0][:3] == ["file", "method", "quantity"]
    assert sum(r[1] == "dom" and r[0] != "pooled" for r in rows[1:]) == 4
    assert sum(r[1] == "or" and r[0] != "pooled" for r in rows[1:]) == 4
    assert {r[1] for r in rows[1:] if r[0] == "pooled"} == {"dom", "or"}


def test_evaluate_binary_outcomes(workspace, tmp_path):
    root, _ = workspace
    spec = write(tmp_path / "bench.ini", "[benchmark]\nn = 2000\nmargin = logistic\nbeta = 2\nc = -1\n")
    assert main(["generate", str(root / "model" / "model.ffm"), "--config", str(spec),
                 "--out", str(tmp_path)]) == 0
    assert main(["evaluate", str(tmp_path / "benchmark.csv"), "--out", str(tmp_path / "est.csv")]) == 0
    methods = {(r[1], r[2]) for r in read_csv(tmp_path / "est.csv")[1:]}
    assert ("ipw", "slope") in methods and ("logistic-or", "intercept") in methods


def test_evaluate_needs_files(capsys):
    with pytest.raises(SystemExit) as info:
        main(["evaluate", "--out", "x.csv"])
    assert info.value.code == 2


def test_diagnose_self_comparison(workspace, tmp_path, capsys):
    root, _ = workspace
    data = str(root / "m2.csv")
    assert main(["diagnose", data, data, "--out", str(tmp_path / "diag.csv")]) == 0
    assert capsys.readouterr().out.strip() == "max_abs_difference 0.0"
    rows = read_csv(tmp_path / "diag.csv")
    assert {r[0] for r in rows[1:]} == {"real", "synthetic", "difference"}


def test_missing_treatment_column_is_a_usage_error(tmp_path, capsys):
    path = write(tmp_path / "d.csv", "z1,y\n0.5,1\n")
    assert main(["fit", str(path), "--out", str(tmp_path / "m")]) == 2
    assert "missing" in capsys.readouterr().err


def test_missing_file_is_a_runtime_error(tmp_path, capsys):
    assert main(["diagnose", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--out", str(tmp_path / "o.csv")]) == 1


def test_unknown_dgp(tmp_path):
    cfg = write(tmp_path / "c.ini", "[dgp]\nname = m9\n")
    assert main(["simulate-dgp", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 2


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-m", "frugalflows", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "simulate-dgp" in out.stdout


def test_undeclared_kind_warns(tmp_path):
    path = write(tmp_path / "d.csv", "z1,t,y\n0,0,1\n1,1,3\n1,0,2\n")
    with pytest.warns(UserWarning, match="guessed discrete"):
        ds = ffio.read_dataset(path)
    assert ds.z_kinds == ("discrete",)
