import json

import numpy as np
import pytest

from defhtr.cli import main
from defhtr.data import write_pgm


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset and a one-epoch checkpoint shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--count", "14", "--charset", "abc ", "--min-len", "2",
                 "--max-len", "4", "--seed", "1", "--split", "8,3,3"]) == 0
    run_dir = root / "run"
    assert main(["train", "--train-manifest", str(data / "train.tsv"), "--val-manifest", str(data / "val.tsv"),
                 "--out", str(run_dir), "--width-multiplier", "0.0625", "--max-epochs", "1",
                 "--batch-size", "4", "--lr", "1e-3"]) == 0
    return data, run_dir


def test_synth_and_train_outputs(workspace):
    data, run_dir = workspace
    assert len((data / "train.tsv").read_text().splitlines()) == 8
    for name in ("best.ckpt", "last.ckpt", "log.jsonl", "curves.png"):
        assert (run_dir / name).is_file()
    assert json.loads((run_dir / "log.jsonl").read_text().splitlines()[0])["epoch"] == 1


def test_train_logs_epochs_as_json_lines(workspace, capsys, tmp_path):
    data, _ = workspace
    code, out, err = run(capsys, "train", "--train-manifest", data / "train.tsv", "--val-manifest",
                         data / "val.tsv", "--out", tmp_path, "--width-multiplier", "0.0625", "--max-epochs", 1,
                         "--batch-size", 4, "--conv-mode", "standard")
    events = [json.loads(l)["event"] for l in err.splitlines()]
    assert code == 0 and "epoch" in events and events[-1] == "exit"
    assert json.loads(out)["best_epoch"] == 1


def test_eval_report_rows(workspace, capsys, tmp_path):
    data, run_dir = workspace
    code, out, _ = run(capsys, "eval", "--checkpoint", run_dir / "best.ckpt", "--manifest", data / "test.tsv",
                       "--out", tmp_path / "r.tsv", "--figure", tmp_path / "h.png")
    assert code == 0
    assert len((tmp_path / "r.tsv").read_text().splitlines()) == 1 + 3
    assert json.loads(out)["samples"] == 3 and (tmp_path / "h.png").is_file()


def test_eval_rejects_empty_manifest(workspace, capsys, tmp_path):
    _, run_dir = workspace
    (tmp_path / "empty.tsv").write_text("")
    code, _, err = run(capsys, "eval", "--checkpoint", run_dir / "best.ckpt", "--manifest", tmp_path / "empty.tsv")
    assert code == 2 and "no samples" in err


def test_eval_rejects_uncovered_symbols(workspace, capsys, tmp_path):
    data, run_dir = workspace
    rel = (data / "test.tsv").read_text().splitlines()[0].split("\t")[0]
    (data / "bad.tsv").write_text(f"{rel}\tzzz\n")
    code, _, err = run(capsys, "eval", "--checkpoint", run_dir / "best.ckpt", "--manifest", data / "bad.tsv")
    assert code == 2 and "'z'" in err


def test_transcribe_is_deterministic(workspace, capsys):
    data, run_dir = workspace
    image = data / (data / "test.tsv").read_text().splitlines()[0].split("\t")[0]
    first = run(capsys, "transcribe", "--checkpoint", run_dir / "best.ckpt", image)
    second = run(capsys, "transcribe", "--checkpoint", run_dir / "best.ckpt", image)
    assert first[0] == 0 and first[1] == second[1]


def test_transcribe_too_narrow_is_a_geometry_error(workspace, capsys, tmp_path):
    _, run_dir = workspace
    write_pgm(tmp_path / "thin.pgm", np.full((60, 2), 255, np.uint8))
    code, _, err = run(capsys, "transcribe", "--checkpoint", run_dir / "best.ckpt", tmp_path / "thin.pgm")
    assert code == 2 and "GeometryError" in err


def test_visualisations(workspace, capsys, tmp_path):
    data, run_dir = workspace
    image = data / (data / "test.tsv").read_text().splitlines()[0].split("\t")[0]
    code, out, _ = run(capsys, "viz-offsets", "--checkpoint", run_dir / "best.ckpt", "--image", image,
                       "--out", tmp_path)
    assert code == 0 and "ratio" in json.loads(out)
    assert (tmp_path / "offsets_layer0.pgm").is_file() and (tmp_path / "offsets_layer0.png").is_file()
    code, out, _ = run(capsys, "viz-rf", "--checkpoint", run_dir / "best.ckpt", "--image", image,
                       "--column", 1, "--out", tmp_path)
    assert code == 0 and json.loads(out)["pixels"] > 0
    assert (tmp_path / "rf_col1.ppm").is_file() and (tmp_path / "rf_col1.png").is_file()
    code, _, _ = run(capsys, "viz-rf", "--checkpoint", run_dir / "best.ckpt", "--image", image,
                     "--column", 10_000, "--out", tmp_path)
    assert code == 2


def test_finetune(workspace, capsys, tmp_path):
    data, run_dir = workspace
    code, out, _ = run(capsys, "finetune", "--checkpoint", run_dir / "best.ckpt", "--train-manifest",
                       data / "train.tsv", "--val-manifest", data / "val.tsv", "--out", tmp_path,
                       "--max-epochs", 1, "--batch-size", 4)
    assert code == 0 and (tmp_path / "best.ckpt").is_file() and (tmp_path / "curves.png").is_file()


def test_resume_extends_a_run(workspace, capsys, tmp_path):
    data, _ = workspace
    base = ["train", "--train-manifest", data / "train.tsv", "--val-manifest", data / "val.tsv", "--out", tmp_path,
            "--width-multiplier", "0.0625", "--batch-size", 4]
    assert run(capsys, *base, "--max-epochs", 1)[0] == 0
    assert run(capsys, *base, "--max-epochs", 2, "--resume")[0] == 0
    assert [json.loads(l)["epoch"] for l in (tmp_path / "log.jsonl").read_text().splitlines()] == [1, 2]
    assert run(capsys, *base, "--max-epochs", 3, "--resume", "--conv-mode", "standard")[0] == 2


def test_params_table(capsys):
    code, out, _ = run(capsys, "params", "--variant", "crnn", "--conv-mode", "deformable")
    assert code == 0 and out.splitlines()[0].startswith("layer")
    first = next(l.split("\t") for l in out.splitlines() if l.startswith("conv0\t"))
    assert first[1] == "deformable_layer" and first[8] == str(9 * 1 * (18 + 64))


def test_gradcheck_exit_codes(capsys):
    assert run(capsys, "gradcheck", "--op", "deform_conv", "--repeats", 2)[0] == 0
    code, out, _ = run(capsys, "gradcheck", "--op", "linear", "--repeats", 2, "--perturb", 1e-2)
    assert code == 1 and "FAIL" in out
    assert run(capsys, "gradcheck", "--op", "nonsense")[0] == 2


def test_config_file_seed_and_flag_precedence(capsys, tmp_path, monkeypatch):
    (tmp_path / "cfg.json").write_text(json.dumps({"count": 2, "seed": 3, "charset": "ab"}))
    monkeypatch.setenv("HTR_SEED", "9")
    code, _, err = run(capsys, "synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "d", "--count", 1)
    notices = [json.loads(l) for l in err.splitlines() if json.loads(l)["event"] == "notice"]
    assert code == 0 and len(notices) == 2
    generator = json.loads((tmp_path / "d" / "generator.json").read_text())
    assert generator["seed"] == 9 and generator["count"] == 1


def test_bad_config_is_an_input_error(capsys, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "d")[0] == 2
    assert run(capsys, "train", "--train-manifest", tmp_path / "none.tsv")[0] == 2
    assert run(capsys, "synth", "--out", tmp_path / "e", "--charset", "a@")[0] == 2
    assert run(capsys, "params", "--charset-size", 1)[0] == 2
