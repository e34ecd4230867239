import numpy as np
import pytest

from kd_debias import checkpoint
from kd_debias.cli import run_command
from kd_debias.config import ConfigError, RunConfig, load_config, parse_config_text
from kd_debias.distiller import StudentModel

SMALL = ["--users", "30", "--items", "40", "--per-user", "12", "--dim", "6", "--epochs", "2", "--batch", "64",
         "--lr-teacher", "0.5", "--lr-distill", "1.0", "--warmup", "1"]


def test_config_defaults_and_round_trip(tmp_path):
    c = RunConfig()
    assert (c.dim, c.envs, c.alpha, c.beta, c.gamma, c.lr_teacher, c.lr_distill) == (40, 2, 1.9, 9.9, 0.17, 0.003, 0.005)
    path = tmp_path / "c.txt"
    c2 = c.replace(seed=9, k=[5, 10], synthetic=True, l2=1e-4)
    path.write_text(c2.to_text())
    assert load_config(path) == c2
    assert load_config(path, {"seed": 3}).seed == 3


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("nope=1")
    with pytest.raises(ConfigError, match=":2"):
        parse_config_text("dim=4\nalpha=abc")
    assert parse_config_text("# c\nlr-teacher = 0.5\n") == {"lr_teacher": 0.5}


def test_usage_errors(capsys):
    assert run_command(["bogus"]) == 2
    assert run_command(["pipeline", "--no-such-flag"]) == 2
    assert run_command([]) == 2


def test_runtime_error_is_one_line(tmp_path, capsys):
    assert run_command(["train-mf", "--data", str(tmp_path / "missing.tsv"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("kd-debias train-mf: error:") and "\n" not in err


def _files(d):
    return {p.name: p.read_bytes() for p in d.iterdir() if p.suffix in (".csv", ".ckpt")}


def test_pipeline_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_command(["pipeline", "--synthetic", "--seed", "7", "--out", str(out)] + SMALL) == 0
    fa, fb = _files(a), _files(b)
    assert set(fa) == {"metrics.csv", "teacher.ckpt", "student.ckpt", "mf.ckpt"}
    assert fa == fb
    for name in ("config.txt", "train_biased.tsv", "test_unbiased.tsv", "teacher_envs.txt"):
        assert (a / name).exists()
    # the echoed config reproduces the run
    c = tmp_path / "c"
    assert run_command(["pipeline", "--config", str(a / "config.txt"), "--out", str(c)]) == 0
    assert _files(c) == fa


def test_pipeline_no_kd_reports_teacher(tmp_path):
    out = tmp_path / "nk"
    assert run_command(["pipeline", "--synthetic", "--mode", "no-kd", "--out", str(out)] + SMALL) == 0
    text = (out / "metrics.csv").read_text()
    assert "teacher-fusion" in text and not (out / "student.ckpt").exists()


def test_file_workflow_and_mode_equivalence(tmp_path, capsys):
    data = tmp_path / "data"
    assert run_command(["synth", "--out", str(data)] + SMALL) == 0
    common = ["--data", str(data / "biased.tsv")] + SMALL
    assert run_command(["train-teacher", "--out", str(tmp_path / "t")] + common) == 0
    teacher = str(tmp_path / "t" / "teacher.ckpt")
    envs = str(tmp_path / "t" / "teacher_envs.txt")
    for mode, extra, out in (("no-variant", [], "nv"), ("full", ["--gamma", "0"], "g0")):
        assert run_command(["distill", "--teacher", teacher, "--envs-file", envs, "--mode", mode,
                            "--out", str(tmp_path / out)] + extra + common) == 0
    assert (tmp_path / "nv" / "student.ckpt").read_bytes() == (tmp_path / "g0" / "student.ckpt").read_bytes()
    assert run_command(["train-mf", "--out", str(tmp_path / "mf")] + common) == 0
    capsys.readouterr()
    assert run_command(["eval", "--model", str(tmp_path / "mf" / "mf.ckpt"), "--test", str(data / "unbiased.tsv"),
                        "--k", "5", "--k", "10"]) == 0
    out = capsys.readouterr().out
    assert "ndcg@5" in out and "recall@10" in out


def test_eval_reports_coat_sized_student(tmp_path, capsys):
    rng = np.random.default_rng(0)
    model = tmp_path / "coat.ckpt"
    checkpoint.save_checkpoint(StudentModel(rng.normal(size=(290, 40)), rng.normal(size=(300, 40))), model)
    test = tmp_path / "test.tsv"
    test.write_text("".join(f"{u}\t{i}\t{r}\n" for u in range(290) for i, r in ((u % 300, 5), ((u + 7) % 300, 2))))
    assert run_command(["eval", "--model", str(model), "--test", str(test), "--k", "5"]) == 0
    assert "parameters\t23600" in capsys.readouterr().out


def test_stability_command(tmp_path, capsys):
    out = tmp_path / "s"
    assert run_command(["stability", "--synthetic", "--runs", "2", "--out", str(out)] + SMALL) == 0
    lines = (out / "stability.csv").read_text().splitlines()
    assert lines[0] == "model,metric,mean,std"
    assert any(line.startswith("kd-debias,ndcg@5,") for line in lines)
    assert any(line.startswith("mf,recall@5,") for line in lines)
