import json
from pathlib import Path

import numpy as np
import pytest

from flexdepth import checkpoint
from flexdepth.cli import main

TINY = [
    "data.vocab_size=5", "data.feature_dim=6", "data.label_len=2,4",
    "data.train_size=24", "data.dev_size=4", "data.test_size=8",
    "encoder.blocks=2", "encoder.dim=8", "encoder.ff_dim=16",
    "encoder.heads=2", "encoder.conv_kernel=3",
    "pipeline.total_steps=10", "pipeline.iterations=2",
    "pipeline.batch_size=3", "pipeline.subnet_layers=8,4",
    "pipeline.checkpoint_interval=0",
]


def tiny_args(*extra):
    args = []
    for kv in TINY + list(extra):
        args += ["--set", kv]
    return args


def run_tiny_train(out, *extra):
    return main(["train", "--out", str(out)] + tiny_args(*extra))


def test_train_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_tiny_train(out) == 0
    assert (out / "manifest.json").is_file()
    assert (out / "config.txt").is_file()
    assert (out / "metrics.jsonl").is_file()
    assert (out / "masks.txt").is_file()
    assert checkpoint.exists(out / "checkpoints" / "final")
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["artifacts"]) >= {"metrics", "masks", "checkpoints"}
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 10
    for line in lines:
        json.loads(line)


def test_train_rejects_unknown_key(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path / "x"),
                 "--set", "pipeline.bogus=1"])
    assert code == 1
    assert "pipeline.bogus" in capsys.readouterr().err


def test_train_resume_hash_mismatch(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_tiny_train(out) == 0
    code = run_tiny_train(out, "run.seed=1")
    assert code == 1
    assert "resume mismatch" in capsys.readouterr().err


def test_train_rerun_same_config_completes(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_tiny_train(out) == 0
    assert run_tiny_train(out) == 0
    assert "already complete" in capsys.readouterr().out


def test_train_resume_from_interval_checkpoint(tmp_path):
    full = tmp_path / "full"
    assert run_tiny_train(full) == 0

    part = tmp_path / "part"
    # interval checkpoints every 4 steps; simulate an interrupted run by
    # rewinding LATEST to step4, then resume
    assert run_tiny_train(part, "pipeline.checkpoint_interval=4") == 0
    (part / "checkpoints" / "LATEST").write_text("step4\n")
    assert run_tiny_train(part, "pipeline.checkpoint_interval=4") == 0

    t_full, _ = checkpoint.load(full / "checkpoints" / "final")
    t_part, _ = checkpoint.load(part / "checkpoints" / "final")
    for name, v in t_full.items():
        assert t_part[name].tobytes() == v.tobytes(), name
    # the resumed run's metrics log has no duplicated steps
    steps = [json.loads(ln)["step"]
             for ln in (part / "metrics.jsonl").read_text().splitlines()]
    assert steps == sorted(set(steps))


def test_metrics_reproducible_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_tiny_train(a) == 0
    assert run_tiny_train(b) == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "masks.txt").read_bytes() == (b / "masks.txt").read_bytes()


def test_reproducible_from_written_config(tmp_path):
    # the config snapshot a run writes fully reproduces its metrics stream
    a, c = tmp_path / "a", tmp_path / "c"
    assert run_tiny_train(a) == 0
    code = main(["train", "--out", str(c), "--config", str(a / "config.txt")])
    assert code == 0
    assert (a / "metrics.jsonl").read_bytes() == (c / "metrics.jsonl").read_bytes()


def _eval_rows(text):
    return [ln.split("\t") for ln in text.splitlines()
            if "\t" in ln and not ln.startswith(("#", "name"))
            and "->" not in ln]


def test_eval_full_equals_omitted(tmp_path, capsys):
    out = tmp_path / "run"
    run_tiny_train(out)
    capsys.readouterr()
    assert main(["eval", "--run", str(out), "--size", "full"]) == 0
    full_ler = _eval_rows(capsys.readouterr().out)[0][3]
    assert main(["eval", "--run", str(out), "--size", "8"]) == 0
    sized_ler = _eval_rows(capsys.readouterr().out)[0][3]
    assert full_ler == sized_ler  # k=8 is the full supernet here
    assert (out / "eval-test.txt").is_file()


def test_eval_all_sizes_and_param_consistency(tmp_path, capsys):
    from flexdepth.encoder import EncoderConfig, param_count
    from flexdepth.reports import parse_mask_export

    out = tmp_path / "run"
    run_tiny_train(out)
    capsys.readouterr()
    assert main(["eval", "--run", str(out)]) == 0
    rows = _eval_rows(capsys.readouterr().out)
    export = parse_mask_export((out / "masks.txt").read_text())
    ecfg = EncoderConfig(blocks=2, dim=8, ff_dim=16, heads=2, conv_kernel=3,
                         subsample=2, input_dim=6, vocab_size=5)
    by_k = {int(r[1]): int(r[2]) for r in rows}
    for mask, k in zip(export.masks, export.layer_counts):
        assert by_k[k] == param_count(ecfg, mask)
    lers = [float(r[3]) for r in rows]
    assert all(np.isfinite(v) and v >= 0 for v in lers)


def test_eval_unknown_selector(tmp_path, capsys):
    out = tmp_path / "run"
    run_tiny_train(out)
    assert main(["eval", "--run", str(out), "--size", "nope"]) == 1
    assert main(["eval", "--run", str(out), "--size", "7"]) == 1


def test_separate_mode(tmp_path):
    out = tmp_path / "sep"
    code = run_tiny_train(out, "run.mode=separate", "run.separate_layers=8")
    assert code == 0
    assert checkpoint.exists(out / "checkpoints" / "final")
    rec = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["phase"] == "separate"


def test_aux_mode_and_eval(tmp_path, capsys):
    out = tmp_path / "aux"
    assert run_tiny_train(out, "run.mode=aux_loss") == 0
    rec = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["phase"] == "aux_loss"
    assert "loss_aux" in rec
    assert main(["eval", "--run", str(out)]) == 0
    text = capsys.readouterr().out
    assert "aux-half" in text and "full" in text


def test_layer_report(tmp_path, capsys):
    out = tmp_path / "run"
    run_tiny_train(out)
    assert main(["layer-report", "--run", str(out), "--svg"]) == 0
    text = capsys.readouterr().out
    assert "# subnet k=8" in text and "# subnet k=4" in text
    assert (out / "layers.txt").is_file()
    assert (out / "layers.svg").is_file()
    # counts in each subnet section sum to k
    for k in (8, 4):
        section = text.split(f"# subnet k={k}")[1].split("#")[0]
        rows = [ln.split("\t")[1:] for ln in section.strip().splitlines()[1:]]
        total = sum(int(c) for row in rows for c in row)
        assert total == k


def test_verify_command(capsys):
    import time

    t0 = time.monotonic()
    assert main(["verify"]) == 0
    assert time.monotonic() - t0 < 300.0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5


def test_verify_detects_broken_backward(monkeypatch, capsys):
    # flip the sign of the sigmoid backward rule; the suite must name it
    from flexdepth import autodiff as ad

    orig = ad.sigmoid

    def broken(a):
        out = orig(a)
        if a.tape.recording:
            entry = a.tape.entries[-1]
            true_back = entry.backward
            entry.backward = lambda g: tuple(-x for x in true_back(g))
        return out

    monkeypatch.setattr("flexdepth.verify.ad.sigmoid", broken)
    assert main(["verify", "--fast"]) == 2
    out = capsys.readouterr().out
    assert "FAIL gradient-checks" in out
    assert "sigmoid" in out


def test_sweep(tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["sweep", "--axis", "dropout", "--values", "0,0.3",
                 "--out", str(out)] + tiny_args())
    assert code == 0
    text = (out / "sweep.txt").read_text()
    assert "# sweep over dropout" in text
    lines = text.strip().splitlines()
    assert lines[1].startswith("value")
    assert len(lines) == 4  # header comment, header, two value rows
    assert (out / "dropout-0" / "metrics.jsonl").is_file()
    assert (out / "dropout-0.3" / "metrics.jsonl").is_file()


def test_sweep_split_axis_values(tmp_path):
    out = tmp_path / "sweep"
    code = main(["sweep", "--axis", "split", "--values", "50/50,60/40",
                 "--out", str(out)] + tiny_args())
    assert code == 0
    cfg_a = (out / "split-50-50" / "config.txt").read_text()
    assert "pipeline.step1_fraction = 0.5" in cfg_a


def test_sweep_empty_values(tmp_path, capsys):
    assert main(["sweep", "--axis", "dropout", "--values", "",
                 "--out", str(tmp_path)]) == 1
    assert main(["sweep", "--axis", "bogus", "--values", "1",
                 "--out", str(tmp_path)]) == 1
