import json
import subprocess
import sys

from concise_rl.checkpoint import save_checkpoint
from concise_rl.cli import main

from conftest import answering_policy

TINY = {
    "seed": 1,
    "policy": {"k": 3, "e": 4, "h": 8},
    "base": {"steps": 0},
    "stage1": {"steps": 2, "batch_groups": 2, "G": 4, "L_max": 8, "max_attempts": 4,
               "mix": {"EASY": 1.0}},
    "stage2": {"steps": 1, "batch_groups": 2, "G": 4, "L_max": 8, "mix": {"EASY": 1.0}},
    "eval": {"n_questions": 5, "samples_per_question": 4, "L_max": 8, "mix": {"EASY": 1.0}},
}


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def test_train_starvation_exit_code(tmp_path, capsys):
    # an untrained policy never answers correctly, so stage 1 cannot fill a batch
    cfg = write(tmp_path, "c.json", {**TINY, "output_dir": str(tmp_path / "run")})
    assert main(["train", "--config", cfg]) == 3
    assert "STAGE1" in capsys.readouterr().err


def test_train_config_error_exit_code(tmp_path):
    cfg = write(tmp_path, "c.json", {**TINY, "stage2": {"filter_mode": "STAGE1"}})
    assert main(["train", "--config", cfg]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_eval_reports_and_dumps(tmp_path, capsys):
    ckpt = tmp_path / "p.ckpt"
    save_checkpoint(ckpt, answering_policy({"4": 0.5, "2": 0.5}), stage="stage1", step=9)
    cfg = write(tmp_path, "c.json", TINY)
    dump = tmp_path / "corpus.jsonl"
    assert main(["eval", "--checkpoint", str(ckpt), "--config", cfg, "--dump", str(dump)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["stage"] == "stage1" and out["step"] == 9
    assert 0.0 <= out["pass_at_1"] <= 1.0 and out["mean_len"] == 7.0
    rows = [json.loads(line) for line in dump.read_text().splitlines()]
    assert len(rows) == 5 * 4
    assert main(["analyze", "lengths", "--corpus", str(dump)]) == 0
    assert json.loads(capsys.readouterr().out)["n_total"] == 20


def test_eval_bad_checkpoint(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(bad)]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "concise_rl", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "analyze" in out.stdout
