import pytest

from xlprompt.cli import main
from xlprompt.harness import parse_results, parse_table


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root), "--pairs-per-class", "12", "--dev-per-class", "6"]) == 0
    assert main(["pretrain", "--text", str(root / "pretrain.txt"), "--pack-dir", str(root / "packs"),
                 "--out", str(root / "base.ckpt"), "--d", "16", "--layers", "1", "--heads", "2",
                 "--max-len", "64", "--steps", "10", "--log-every", "0"]) == 0
    return root


def common(ws, *extra):
    return ["--data", str(ws / "data"), "--model-path", str(ws / "base.ckpt"), "--pack-dir", str(ws / "packs"),
            "-K", "2", "--epochs", "1", "--lr", "1e-3", *extra]


def test_synth_layout(workspace):
    for name in ("data/train.tsv", "data/dev.tsv", "data/test.tsv", "packs/en.ini", "packs/x1.ini",
                 "packs/x2.ini", "pretrain.txt", "base.ckpt"):
        assert (workspace / name).exists(), name


def test_sample_writes_split(workspace, tmp_path):
    assert main(["sample", "--data", str(workspace / "data"), "-K", "2", "--seed", "3", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "train.tsv").read_text().splitlines()) == 7
    assert len((tmp_path / "dev.tsv").read_text().splitlines()) == 7


def test_train_then_eval(workspace, tmp_path, capsys):
    out = tmp_path / "art.ckpt"
    assert main(["train", *common(workspace, "--method", "MP"), "--out", str(out)]) == 0
    assert "selected_epoch 1" in capsys.readouterr().out
    assert main(["eval", "--artifacts", str(out), "--data", str(workspace / "data"),
                 "--languages", "en", "x1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split("\t")[0] for ln in lines] == ["en", "x1"]


def test_train_from_split_dir(workspace, tmp_path, capsys):
    main(["sample", "--data", str(workspace / "data"), "-K", "2", "--seed", "1", "--out", str(tmp_path)])
    assert main(["train", *common(workspace, "--method", "FT"), "--split-dir", str(tmp_path)]) == 0


def test_transfer_and_inlanguage_results(workspace, tmp_path):
    res = tmp_path / "t.tsv"
    assert main(["transfer", *common(workspace, "--method", "DP"), "--results", str(res)]) == 0
    assert {r.language for r in parse_results(res.read_text())} == {"en", "x1", "x2"}
    assert main(["inlanguage", *common(workspace, "--method", "DP", "--train-language", "x2"),
                 "--results", str(res)]) == 0
    assert [r.language for r in parse_results(res.read_text())] == ["x2"]


def test_sweep_and_report(workspace, tmp_path, capsys):
    res = tmp_path / "r.tsv"
    table = tmp_path / "table.txt"
    argv = ["sweep", *common(workspace, "--method", "SP"), "--seeds", "1,2", "--results", str(res),
            "--report", str(table)]
    assert main(argv) == 0
    first = res.read_bytes()
    assert main(argv) == 0
    assert res.read_bytes() == first
    assert ("2", "SP") in parse_table(table.read_text())
    assert main(["report", str(res), "--format", "tsv"]) == 0
    parsed = parse_table(capsys.readouterr().out)
    assert set(parsed[("2", "SP")]) == {"en", "x1", "x2", "X̄"}
    assert main(["report", str(res), "--variance"]) == 0
    assert capsys.readouterr().out.startswith("method\tK\tlanguage\tmean\tstd\tvariance\tn")


def test_config_file_with_flag_override(workspace, tmp_path, capsys):
    ini = tmp_path / "exp.ini"
    ini.write_text(f"[experiment]\nmethod = DP\nK = 2\nepochs = 3\nlr = 0.001\n"
                   f"model_path = {workspace / 'base.ckpt'}\npack_dir = {workspace / 'packs'}\n")
    assert main(["train", "--config", str(ini), "--data", str(workspace / "data"), "--epochs", "1"]) == 0
    out = capsys.readouterr().out
    assert "epoch 1 " in out and "epoch 2 " not in out


@pytest.mark.parametrize("argv, needle", [
    (["train", "--method", "DP", "--data", "nowhere"], "model"),
    (["train", "--data", "nowhere"], "method"),
    (["sample", "--data", "nowhere", "-K", "2", "--seed", "1", "--out", "x"], "error"),
    (["report", "missing.tsv"], "error"),
])
def test_errors_exit_nonzero(argv, needle, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("xlprompt ") and needle in err and len(err.strip().splitlines()) == 1


def test_bad_config_key(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[experiment]\nmethod = DP\ncolour = blue\n")
    assert main(["train", "--config", str(ini)]) == 1
    assert "colour" in capsys.readouterr().err


def test_k_too_large_is_reported(workspace, capsys):
    argv = ["train", *common(workspace, "--method", "DP")]
    argv[argv.index("-K") + 1] = "50"
    assert main(argv) == 1
    assert "need 50" in capsys.readouterr().err
