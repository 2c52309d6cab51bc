import json

import numpy as np
import pytest

from certilip import errors
from certilip.checkpoint import load_checkpoint
from certilip.cli import main, parse_eps, resolve_config
from certilip.data import write_idx
from certilip.errors import ConfigError


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--epochs", "3", "--seed", "1", "--out", str(out), "--checkpoint-every", "2"]) == 0
    return out


def test_eps_fraction_syntax():
    assert parse_eps("36/255,72/255,108/255") == [36 / 255, 72 / 255, 108 / 255]
    assert parse_eps("0.1") == [0.1]
    with pytest.raises(ConfigError):
        parse_eps("1/0")
    with pytest.raises(ConfigError):
        parse_eps("-0.1")


def test_flags_override_file():
    cfg = resolve_config({"train": {"epochs": 7, "lr": 0.5}}, {"train": {"epochs": 2, "lr": None}})
    assert cfg["train"]["epochs"] == 2
    assert cfg["train"]["lr"] == 0.5
    assert cfg["train"]["margin"] == 0.7


def test_train_outputs(small_run):
    assert (small_run / "metrics.csv").read_text().count("\n") == 4
    assert {p.name for p in (small_run / "checkpoints").iterdir()} == {"best", "last", "epoch-0002"}
    report = json.loads((small_run / "report.json").read_text())
    assert set(report) >= {"clean_accuracy", "certified", "attack", "lipschitz_lower_bound"}


def test_zero_epochs_writes_initial_checkpoint(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--epochs", 0, "--seed", 3, "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "metrics.csv").read_text().strip().count("\n") == 0
    net, _, manifest = load_checkpoint(tmp_path / "checkpoints" / "last")
    assert manifest["step"] == 0
    from certilip.layers import build_network
    fresh = build_network(manifest["arch"], seed=3)
    x = np.random.default_rng(0).standard_normal((4, 2)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(x), fresh.forward(x))


def test_certify_reports_each_eps(small_run, capsys, tmp_path):
    code, out, _ = run(capsys, "certify", "--checkpoint", small_run / "checkpoints" / "last",
                       "--eps", "36/255,72/255,108/255", "--out", tmp_path)
    assert code == 0
    report = json.loads(out)
    assert [c["eps"] for c in report["certified"]] == [36 / 255, 72 / 255, 108 / 255]
    accs = [c["accuracy"] for c in report["certified"]]
    assert accs == sorted(accs, reverse=True)
    assert (tmp_path / "certify.csv").exists()


def test_eval_attack_lipschitz(small_run, capsys):
    ck = small_run / "checkpoints" / "last"
    code, out, _ = run(capsys, "eval", "--checkpoint", ck, "--eps", "0.1", "--pairs", 16)
    report = json.loads(out)
    assert code == 0
    assert report["attack"][0]["accuracy"] >= report["certified"][0]["accuracy"]
    assert 0 < report["lipschitz_lower_bound"] <= report["lipschitz_upper_bound"] + 1e-4
    code, out, _ = run(capsys, "attack", "--checkpoint", ck, "--eps", "0.1")
    assert code == 0 and json.loads(out)["attack"][0]["eps"] == 0.1
    code, out, _ = run(capsys, "lipschitz", "--checkpoint", ck, "--pairs", 16)
    assert code == 0 and json.loads(out)["lipschitz_lower_bound"] > 0


def test_inspect(small_run, capsys, tmp_path):
    code, out, _ = run(capsys, "inspect", "--checkpoint", small_run / "checkpoints" / "last")
    info = json.loads(out)
    assert code == 0 and info["param_count"] > 0 and info["step"] == 3 * 7
    write_idx(tmp_path / "a.idx", np.zeros((3, 4), np.uint8))
    code, out, _ = run(capsys, "inspect", "--idx", tmp_path / "a.idx")
    assert json.loads(out)["shape"] == [3, 4]


def test_flow_sim_quadratic_decay(capsys):
    code, out, _ = run(capsys, "flow-sim", "--spec", "quadratic", "--mu", 1, "--T", 1, "--step", 0.01)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].split(",")[:2] == ["t", "d_t"]
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    d0 = rows[0, 1]
    np.testing.assert_allclose(rows[:, 1], np.exp(-rows[:, 0]) * d0, rtol=1e-9)
    assert rows[-1, 0] == 1.0


def test_flow_sim_discrete_scheme(capsys, tmp_path):
    code, _, _ = run(capsys, "flow-sim", "--spec", "icnn", "--scheme", "split_midpoint", "--skew", 1,
                     "--step", 0.1, "--out", tmp_path)
    assert code == 0
    text = (tmp_path / "flow.csv").read_text().splitlines()
    assert text[0].startswith("scheme,") and len(text) == 11


def test_reproducible_runs(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--epochs", "2", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    for name in ("manifest.json", "weights.bin", "optimizer.bin"):
        a = (tmp_path / "a" / "checkpoints" / "last" / name).read_bytes()
        assert a == (tmp_path / "b" / "checkpoints" / "last" / name).read_bytes()


# -- every error path surfaces a stable identifier ---------------------------

def _bad_checkpoint(tmp_path, small_run, mutate):
    import shutil
    dst = tmp_path / "ck"
    shutil.copytree(small_run / "checkpoints" / "last", dst)
    mutate(dst)
    return dst


def _set_version(d):
    m = json.loads((d / "manifest.json").read_text())
    m["format_version"] = 2
    (d / "manifest.json").write_text(json.dumps(m))


def _truncate(d):
    p = d / "weights.bin"
    p.write_bytes(p.read_bytes()[:-8])


def _flip(d):
    p = d / "weights.bin"
    b = bytearray(p.read_bytes())
    b[0] ^= 1
    p.write_bytes(bytes(b))


@pytest.mark.parametrize("mutate,code", [(_set_version, "E_CHECKPOINT_VERSION"),
                                         (_truncate, "E_CHECKPOINT_LENGTH"),
                                         (_flip, "E_CHECKPOINT_CHECKSUM")])
def test_checkpoint_error_codes(tmp_path, small_run, capsys, mutate, code):
    ck = _bad_checkpoint(tmp_path, small_run, mutate)
    status, _, err = run(capsys, "certify", "--checkpoint", ck)
    assert f"error[{code}]" in err
    assert status == errors.CheckpointError.exit_status


def test_usage_errors(capsys):
    for argv in (["train", "--bogus"], ["nosuchcommand"], [], ["train", "--epochs", "x"], ["inspect"]):
        status, _, err = run(capsys, *argv)
        assert status == 2 and "error[E_USAGE]" in err


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    for text in ("colour: red\n", "train: {epochs: 1, momentum: 0.9}\n", "[1, 2\n", "- 1\n",
                 "eval: {eps: 0.1, colour: 1}\n", "preset: nosuch\n", "train: {batch_size: 0}\n"):
        bad.write_text(text)
        status, _, err = run(capsys, "train", "--config", bad, "--out", tmp_path / "o")
        assert status == 2 and "error[E_CONFIG]" in err, text
    status, _, err = run(capsys, "train", "--config", tmp_path / "missing.yaml")
    assert "error[E_CONFIG]" in err


def test_config_file_used(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 2\ntrain: {epochs: 1, batch_size: 64}\neval: {eps: 36/255}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "checkpoints" / "last" / "manifest.json").read_text())
    assert m["seed"] == 2 and m["config"]["train"]["batch_size"] == 64
    assert m["config"]["eval"]["eps"] == [36 / 255]


def test_dataset_error_codes(tmp_path, capsys):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    write_idx(img, np.zeros((4, 28, 28), np.uint8))
    lab.write_bytes(b"\x00\x01\x08\x01" + (4).to_bytes(4, "big") + bytes(4))
    status, _, err = run(capsys, "train", "--preset", "mnist-cpl-tiny", "--images", img, "--labels", lab,
                         "--out", tmp_path / "o")
    assert "error[E_IDX_MAGIC]" in err and "offset 1" in err and status == 8

    csv_path = tmp_path / "d.csv"
    csv_path.write_text("a,b,label\n1,2,0\n3,4\n")
    status, _, err = run(capsys, "train", "--csv", csv_path, "--out", tmp_path / "o")
    assert "error[E_CSV_RAGGED]" in err and status == 8

    csv_path.write_text("a,b,label\n1,2,0\n3,4,7\n")
    status, _, err = run(capsys, "train", "--csv", csv_path, "--out", tmp_path / "o")
    assert "error[E_LABEL_RANGE]" in err and status == 8

    status, _, err = run(capsys, "train", "--csv", tmp_path / "none.csv", "--out", tmp_path / "o")
    assert "error[E_DATASET]" in err and status == 8


def test_relaxed_refusal_code(tmp_path, capsys):
    assert main(["train", "--epochs", "1", "--relaxed-h", "0.5", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    status, _, err = run(capsys, "certify", "--checkpoint", tmp_path / "checkpoints" / "last")
    assert status == 7 and "error[E_UNKNOWN_LIPSCHITZ]" in err
    status, out, _ = run(capsys, "lipschitz", "--checkpoint", tmp_path / "checkpoints" / "last", "--pairs", 8)
    assert status == 0 and json.loads(out)["lipschitz_upper_bound"] is None


def test_thread_variable(monkeypatch, capsys):
    monkeypatch.setenv("CERTILIP_THREADS", "zero")
    status, _, err = run(capsys, "flow-sim", "--T", "0.1", "--step", "0.1")
    assert status == 2 and "error[E_CONFIG]" in err
    monkeypatch.setenv("CERTILIP_THREADS", "1")
    status, _, _ = run(capsys, "flow-sim", "--T", "0.1", "--step", "0.1")
    assert status == 0


def test_missing_checkpoint_code(tmp_path, capsys):
    status, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "nothing")
    assert status == 9 and "error[E_CHECKPOINT]" in err


def test_flow_sim_nonsmooth_continuous_refused(capsys):
    status, _, err = run(capsys, "flow-sim", "--spec", "hinge")
    assert status == 2 and "error[E_CONFIG]" in err


def test_every_error_class_has_unique_code():
    classes = [c for c in vars(errors).values() if isinstance(c, type) and issubclass(c, errors.CertilipError)]
    codes = [c.code for c in classes]
    assert len(codes) == len(set(codes))
    assert all(c.code.startswith("E_") and isinstance(c.exit_status, int) and c.exit_status > 0 for c in classes)
