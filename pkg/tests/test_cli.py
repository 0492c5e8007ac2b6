import json
import re

import pytest

from toricmoe.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, OUT_ENV, build_parser, main
from toricmoe.lattice import build_toric_code

TINY = {"L": 4, "embed_dim": 8, "heads": 2, "layers": 2, "moe_layers": [1], "experts": 2,
        "slots_per_expert": 1, "expert_hidden": 8, "mlp_hidden": 8, "head_hidden": 8, "head": "token"}
SUBCOMMANDS = ("code-info", "gen-data", "train", "eval", "compare", "slots-export")


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--L", "4", "--p", "0.05", "0.1", "--count-per-rate", "48", "--seed", "1",
                 "--out", str(d / "train.tqds")]) == EXIT_OK
    assert main(["gen-data", "--L", "4", "--p", "0.1", "--count-per-rate", "32", "--seed", "1",
                 "--start", "100000", "--out", str(d / "val.tqds")]) == EXIT_OK
    (d / "tiny.json").write_text(json.dumps(TINY))
    return d


def _train(datasets, run_dir, *extra):
    return main(["train", "--data", str(datasets / "train.tqds"), "--val-data", str(datasets / "val.tqds"),
                 "--model-config", str(datasets / "tiny.json"), "--epochs", "2", "--batch-size", "32",
                 "--seed", "3", "--quiet", "--run-dir", str(run_dir), *extra])


@pytest.fixture(scope="module")
def checkpoint(datasets):
    run = datasets / "run"
    assert _train(datasets, run) == EXIT_OK
    return run / "best.ckpt"


def test_code_info(capsys):
    assert main(["code-info", "--L", "4"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "L=4 n=32 m=32 k=2 rank=30" in out
    assert out.count("weight 4") == 4


def test_code_info_dump_echoes_config(tmp_path):
    assert main(["code-info", "--L", "2", "--dump", "h.txt", "--out-dir", str(tmp_path)]) == EXIT_OK
    first = (tmp_path / "h.txt").read_text().splitlines()[0]
    assert first.startswith("# config ") and json.loads(first[9:])["L"] == 2


def test_eval_twice_identical_bytes(tmp_path):
    args = ["eval", "--decoder", "mwpm", "--L", "4", "--p", "0.05", "--trials", "1000", "--seed", "7",
            "--csv", str(tmp_path / "a.csv")]
    assert main(args) == EXIT_OK
    first = (tmp_path / "a.csv").read_bytes()
    assert main(args) == EXIT_OK
    assert first == (tmp_path / "a.csv").read_bytes()
    assert first.startswith(b"# config ")


def test_worker_count_does_not_change_results(tmp_path):
    args = ["eval", "--decoder", "identity", "--L", "4", "--p", "0.1", "--trials", "5000", "--seed", "2"]
    assert main(args + ["--csv", str(tmp_path / "w1.csv")]) == EXIT_OK
    assert main(args + ["--workers", "2", "--csv", str(tmp_path / "w2.csv")]) == EXIT_OK
    body = [(tmp_path / f).read_text().split("\n", 1)[1] for f in ("w1.csv", "w2.csv")]
    assert body[0] == body[1]


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert main(["eval", "--decoder", "identity", "--L", "2", "--p", "0.1", "--trials", "1000",
                 "--csv", "r.csv"]) == EXIT_OK
    assert (tmp_path / "r.csv").exists()
    # an explicit flag beats the environment
    other = tmp_path / "flag"
    assert main(["eval", "--decoder", "identity", "--L", "2", "--p", "0.1", "--trials", "1000",
                 "--csv", "r.csv", "--out-dir", str(other)]) == EXIT_OK
    assert (other / "r.csv").exists()


@pytest.mark.parametrize("argv", [
    ["eval", "--decoder", "mwpm", "--L", "5", "--p", "0.1"],
    ["eval", "--decoder", "mwpm", "--L", "4", "--p", "0.1", "--trials", "10"],
    ["eval", "--decoder", "mwpm", "--L", "4"],
    ["eval", "--decoder", "bp", "--L", "4", "--p", "0.0", "--trials", "1000"],
    ["eval", "--decoder", "model", "--L", "4", "--p", "0.1"],
    ["eval", "--decoder", "mwpm", "--L", "4", "--p", "1.5"],
    ["gen-data", "--out", "x", "--count-per-rate", "0"],
    ["code-info", "--L", "3"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["code-info", "--L", "4", "--bogus"], ["nosuch"], ["eval", "--decoder", "x"]])
def test_unknown_flags_are_hard_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_and_corrupt_inputs_exit_3(tmp_path, datasets, capsys):
    assert main(["train", "--data", str(tmp_path / "none.tqds"), "--val-data", str(tmp_path / "none.tqds"),
                 "--quiet"]) == EXIT_IO
    bad = tmp_path / "bad.tqds"
    raw = bytearray((datasets / "train.tqds").read_bytes())
    raw[-5] ^= 0x01
    bad.write_bytes(bytes(raw))
    assert main(["train", "--data", str(bad), "--val-data", str(datasets / "val.tqds"), "--quiet",
                 "--run-dir", str(tmp_path / "r")]) == EXIT_IO
    assert main(["compare", str(tmp_path / "missing.csv")]) == EXIT_IO
    err = capsys.readouterr().err
    assert "I/O error" in err and "none.tqds" in err


def test_divergent_training_exits_4(tmp_path, datasets, capsys):
    with pytest.warns(RuntimeWarning):
        rc = _train(datasets, tmp_path / "r", "--lr-max", "1e300", "--lr-min", "1e300")
    assert rc == EXIT_NUMERIC
    assert re.search(r"epoch 0 batch \d+ \(step \d+\)", capsys.readouterr().err)


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help_lists_flags_with_defaults(name, capsys):
    with pytest.raises(SystemExit) as exc:
        main([name, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[name]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in out
        if action.option_strings and action.default not in (None, False, "==SUPPRESS==") and action.help:
            assert "default:" in out


def test_train_cli_is_reproducible(tmp_path, datasets):
    files = ("best.ckpt", "last.ckpt", "train_log.jsonl", "run_config.json")
    assert _train(datasets, tmp_path) == EXIT_OK
    first = {f: (tmp_path / f).read_bytes() for f in files}
    assert _train(datasets, tmp_path) == EXIT_OK
    for f in files:
        assert first[f] == (tmp_path / f).read_bytes(), f


def test_train_resume_via_cli(tmp_path, datasets):
    assert _train(datasets, tmp_path / "full") == EXIT_OK
    assert _train(datasets, tmp_path / "part", "--max-epochs", "1") == EXIT_OK
    assert _train(datasets, tmp_path / "part", "--resume") == EXIT_OK
    assert (tmp_path / "full" / "last.ckpt").read_bytes() == (tmp_path / "part" / "last.ckpt").read_bytes()


def test_model_eval_compare_and_svg(tmp_path, checkpoint, capsys):
    common = ["--L", "4", "--p", "0.05", "0.1", "--trials", "1000", "--seed", "5"]
    assert main(["eval", "--decoder", "model", "--checkpoint", str(checkpoint), *common,
                 "--csv", str(tmp_path / "model.csv")]) == EXIT_OK
    assert main(["eval", "--decoder", "mwpm", *common, "--csv", str(tmp_path / "mwpm.csv")]) == EXIT_OK
    assert main(["eval", "--decoder", "bp", *common, "--bp-iters", "10", "--csv", str(tmp_path / "bp.csv")]) == 0
    header = json.loads((tmp_path / "model.csv").read_text().splitlines()[0][9:])
    assert len(header["inputs"]["checkpoint_sha256"]) == 64
    reports = [str(tmp_path / f) for f in ("model.csv", "mwpm.csv", "bp.csv")]
    assert main(["compare", *reports, "--csv", str(tmp_path / "all.csv"), "--svg", str(tmp_path / "all.svg"),
                 "--reference"]) == EXIT_OK
    svg = (tmp_path / "all.svg").read_text()
    assert svg.count('class="point"') == 6
    assert 'class="reference"' in svg
    merged = (tmp_path / "all.csv").read_text()
    assert all(r in merged for r in reports)  # input hashes are keyed by path
    # a grid mismatch is a config error
    assert main(["eval", "--decoder", "identity", "--L", "4", "--p", "0.05", "--trials", "1000",
                 "--csv", str(tmp_path / "short.csv")]) == EXIT_OK
    assert main(["compare", reports[0], str(tmp_path / "short.csv")]) == EXIT_CONFIG
    capsys.readouterr()


def test_slots_export(tmp_path, checkpoint):
    code = build_toric_code(4)
    assert main(["slots-export", "--checkpoint", str(checkpoint), "--error", "X3,Z10",
                 "--csv", str(tmp_path / "slots.csv")]) == EXIT_OK
    lines = (tmp_path / "slots.csv").read_text().splitlines()
    header = json.loads(lines[0][9:])
    assert len(header["syndrome"]) == code.m and header["syndrome"].count("1") == 4
    assert lines[1] == "block,token,edge_kind,row,col,slot0,slot1"
    rows = [line.split(",") for line in lines[2:]]
    assert len(rows) == code.n  # one MoE block
    for tok in range(2):  # every slot is a convex combination of tokens
        assert sum(float(r[5 + tok]) for r in rows) == pytest.approx(1.0, abs=1e-12)
    assert main(["slots-export", "--checkpoint", str(checkpoint), "--defects", "0,99",
                 "--csv", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert main(["slots-export", "--checkpoint", str(checkpoint), "--error", "Q1",
                 "--csv", str(tmp_path / "x.csv")]) == EXIT_CONFIG
