"""Command-line surface: training runs (joint / separate / aux-loss),
evaluation, layer reports, the verification suite, and ablation sweeps.

Exit codes: 0 success, 1 validation failure, 2 verification-suite failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, runconfig, verify
from .data import gen_dataset
from .encoder import aux_param_count, param_count
from .pipeline import (JointTrainer, MetricsWriter, SeparateTrainer,
                       TrainingAborted, aux_half_gate, decode_dataset,
                       make_aux_trainer)
from .reports import (parse_mask_export, render_eval_report,
                      render_layer_report, render_layer_svg,
                      render_mask_export)
from .runconfig import ConfigError

LATEST = "LATEST"


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _load_cfg(args) -> dict:
    cfg = runconfig.load_config(getattr(args, "config", None))
    runconfig.apply_overrides(cfg, getattr(args, "set", None) or [])
    runconfig.validate(cfg)
    return cfg


def _manifest_path(run_dir: Path) -> Path:
    return run_dir / "manifest.json"


def _write_manifest(run_dir: Path, cfg: dict) -> dict:
    manifest = {
        "config": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in cfg.items()},
        "seed": cfg["run.seed"],
        "config_hash": runconfig.config_hash(cfg),
        "artifacts": {
            "config": "config.txt",
            "metrics": "metrics.jsonl",
            "masks": "masks.txt",
            "checkpoints": "checkpoints",
            "layer_report": "layers.txt",
            "eval_report": "eval-{split}.txt",
        },
    }
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(_manifest_path(run_dir), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    (run_dir / "config.txt").write_text(runconfig.canonical_text(cfg))
    return manifest


def _read_manifest(run_dir: Path) -> dict:
    path = _manifest_path(run_dir)
    if not path.is_file():
        raise CliError(f"no run manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    cfg = {k: tuple(v) if isinstance(v, list) else v
           for k, v in manifest["config"].items()}
    manifest["config"] = cfg
    return manifest


def _checkpoint_fn(run_dir: Path, config_hash: str):
    ckpt_root = run_dir / "checkpoints"

    def save(trainer, tag: str) -> str:
        tensors, extras = trainer.state_tensors()
        extras["config_hash"] = config_hash
        path = ckpt_root / tag
        checkpoint.save(path, tensors, extras)
        (ckpt_root / LATEST).write_text(tag + "\n")
        return str(path)

    return save


def _mask_freeze_fn(run_dir: Path):
    def export(trainer) -> None:
        text = render_mask_export(trainer.state.scores, trainer.state.masks)
        (run_dir / "masks.txt").write_text(text)

    return export


def _build_trainer(cfg: dict, run_dir: Path, metrics: MetricsWriter):
    mode = cfg["run.mode"]
    tcfg = runconfig.train_config(cfg)
    dataset = gen_dataset(runconfig.data_config(cfg), seed=cfg["run.seed"])
    ckpt_fn = _checkpoint_fn(run_dir, runconfig.config_hash(cfg))
    if mode == "joint":
        trainer = JointTrainer(runconfig.encoder_config(cfg), tcfg,
                               dataset["train"], metrics, ckpt_fn,
                               mask_freeze_fn=_mask_freeze_fn(run_dir))
    elif mode == "separate":
        blocks = cfg["run.separate_layers"] // 4
        trainer = SeparateTrainer(runconfig.encoder_config(cfg, blocks=blocks),
                                  tcfg, dataset["train"], metrics, ckpt_fn)
    else:
        trainer = make_aux_trainer(runconfig.encoder_config(cfg), tcfg,
                                   dataset["train"], metrics, ckpt_fn)
    return trainer, dataset


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_dir = Path(args.out)
    cfg_hash = runconfig.config_hash(cfg)

    resume_from = None
    if _manifest_path(run_dir).is_file():
        existing = _read_manifest(run_dir)
        if existing["config_hash"] != cfg_hash:
            raise CliError(
                f"resume mismatch: run dir {run_dir} was created with config "
                f"hash {existing['config_hash']}, current is {cfg_hash}")
        latest = run_dir / "checkpoints" / LATEST
        if not latest.is_file():
            raise CliError(f"run dir {run_dir} exists but has no checkpoint "
                           f"to resume from")
        resume_from = run_dir / "checkpoints" / latest.read_text().strip()

    _write_manifest(run_dir, cfg)
    mode = cfg["run.mode"]
    if resume_from is not None:
        _, resume_extras = checkpoint.load(resume_from)
        _truncate_metrics(run_dir / "metrics.jsonl", int(resume_extras["step"]))
    with open(run_dir / "metrics.jsonl", "a" if resume_from else "w") as fh:
        metrics = MetricsWriter(fh)
        trainer, _ = _build_trainer(cfg, run_dir, metrics)
        if resume_from is not None:
            tensors, extras = checkpoint.load(resume_from)
            trainer.restore(tensors, extras)
            if trainer.state.step >= trainer.config.total_steps:
                print(f"run already complete at {run_dir}")
                return 0
            print(f"resuming {mode} run at step {trainer.state.step}")
        try:
            trainer.run()
        except TrainingAborted as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return 1
    print(f"run complete: {run_dir} (mode={mode}, "
          f"steps={trainer.state.step})")
    return 0


def _truncate_metrics(path: Path, resume_step: int) -> None:
    """Drop records at or past the resume step so the log never holds
    duplicates from a partially written tail."""
    if not path.is_file():
        return
    kept = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["step"] < resume_step:
            kept.append(line)
    path.write_text("".join(ln + "\n" for ln in kept))


def _load_run(run_dir: Path, tag: str = "final"):
    manifest = _read_manifest(run_dir)
    cfg = manifest["config"]
    ckpt_dir = run_dir / "checkpoints" / tag
    if not checkpoint.exists(ckpt_dir):
        raise CliError(f"no checkpoint at {ckpt_dir}")
    tensors, extras = checkpoint.load(ckpt_dir)
    return manifest, cfg, tensors, extras


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    manifest, cfg, tensors, extras = _load_run(run_dir, args.checkpoint)
    mode = cfg["run.mode"]
    blocks = (cfg["run.separate_layers"] // 4 if mode == "separate"
              else cfg["encoder.blocks"])
    ecfg = runconfig.encoder_config(cfg, blocks=blocks)
    params = {k: v for k, v in tensors.items()
              if not k.startswith(("adam_", "mask.")) and k != "scores"}
    dataset = gen_dataset(runconfig.data_config(cfg), seed=cfg["run.seed"])
    if args.split not in dataset:
        raise CliError(f"unknown split {args.split!r}")
    utts = dataset[args.split]

    selectors = _selectors_for(args.size, mode, run_dir, ecfg)
    rows = []
    samples = []
    for name, gate, aux in selectors:
        res = decode_dataset(ecfg, params, utts, gate=gate, use_aux_head=aux)
        if aux:
            k = ecfg.num_layers // 2
            n_params = aux_param_count(ecfg)
        else:
            mask = np.ones(ecfg.num_layers) if gate is None else gate
            k = int(mask.sum())
            n_params = param_count(ecfg, mask)
        rows.append({"name": name, "k": k, "params": n_params,
                     "ler": res.label_error_rate, "utterances": len(utts)})
        if not samples:
            samples = list(zip(res.refs[:5], res.hyps[:5]))
    text = render_eval_report(rows, samples, split=args.split)
    out_path = run_dir / f"eval-{args.split}.txt"
    out_path.write_text(text)
    print(text, end="")
    return 0


def _selectors_for(size: str | None, mode: str, run_dir: Path, ecfg):
    """Resolve a --size selector into (name, gate, use_aux_head) triples."""
    masks_path = run_dir / "masks.txt"
    if size is None or size == "all":
        if mode == "joint":
            export = _require_masks(masks_path)
            sel = [(f"subnet-{k}", mask, False)
                   for mask, k in zip(export.masks, export.layer_counts)]
            return sel
        if mode == "aux_loss":
            return [("full", None, False),
                    ("aux-half", aux_half_gate(ecfg.num_layers), True)]
        return [("full", None, False)]
    if size == "full":
        return [("full", None, False)]
    if size == "aux":
        if mode != "aux_loss":
            raise CliError("selector 'aux' is only valid for aux_loss runs")
        return [("aux-half", aux_half_gate(ecfg.num_layers), True)]
    try:
        k = int(size)
    except ValueError:
        raise CliError(f"unknown mask selector {size!r} "
                       f"(use full, aux, all, or a layer count)")
    export = _require_masks(masks_path)
    for mask, km in zip(export.masks, export.layer_counts):
        if km == k:
            return [(f"subnet-{k}", mask, False)]
    raise CliError(f"no subnet with {k} layers in {masks_path}")


def _require_masks(path: Path):
    if not path.is_file():
        raise CliError(f"mask export not found: {path}")
    return parse_mask_export(path.read_text())


def cmd_layer_report(args) -> int:
    if not args.masks and not args.run:
        raise CliError("layer-report needs --run or --masks")
    if args.masks:
        masks_path = Path(args.masks)
        out_dir = masks_path.parent
    else:
        out_dir = Path(args.run)
        masks_path = out_dir / "masks.txt"
    export = _require_masks(masks_path)
    text = render_layer_report(export)
    (out_dir / "layers.txt").write_text(text)
    print(text, end="")
    if args.svg:
        svg_path = out_dir / "layers.svg"
        svg_path.write_text(render_layer_svg(export))
        print(f"svg written to {svg_path}")
    return 0


def cmd_verify(args) -> int:
    results = verify.run_all(fast=args.fast)
    failed = False
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name}: {res.detail}")
        for failure in res.failures[:10]:
            print(f"     {failure}")
        failed = failed or not res.passed
    return 2 if failed else 0


SWEEP_AXES = {
    "dropout": "pipeline.layer_dropout",
    "iterations": "pipeline.iterations",
    "split": "pipeline.step1_fraction",
}


def _parse_sweep_value(axis: str, raw: str):
    raw = raw.strip()
    if axis == "iterations":
        return int(raw)
    if axis == "split" and "/" in raw:   # e.g. 60/40
        return float(raw.split("/")[0]) / 100.0
    return float(raw)


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise CliError(f"unknown sweep axis {args.axis!r}; "
                       f"choose from {sorted(SWEEP_AXES)}")
    values = [v for v in (args.values or "").split(",") if v.strip()]
    if not values:
        raise CliError("sweep needs a non-empty comma-separated --values list")
    parsed = [_parse_sweep_value(args.axis, v) for v in values]

    base_cfg = _load_cfg(args)
    if base_cfg["run.mode"] != "joint":
        raise CliError("sweeps compare subnet sizes and need run.mode=joint")
    out_root = Path(args.out)
    key = SWEEP_AXES[args.axis]
    table_rows = []
    for raw, value in zip(values, parsed):
        cfg = dict(base_cfg)
        cfg[key] = value
        runconfig.validate(cfg)
        tag = raw.replace("/", "-")
        run_dir = out_root / f"{args.axis}-{tag}"
        _write_manifest(run_dir, cfg)
        with open(run_dir / "metrics.jsonl", "w") as fh:
            trainer, dataset = _build_trainer(cfg, run_dir,
                                              MetricsWriter(fh))
            try:
                trainer.run()
            except TrainingAborted as exc:
                print(f"sweep value {raw} aborted: {exc}", file=sys.stderr)
                return 1
        ecfg = runconfig.encoder_config(cfg)
        row = {"value": raw}
        for mask in trainer.state.masks:
            res = decode_dataset(ecfg, trainer.state.params, dataset["test"],
                                 gate=mask)
            row[f"k={int(mask.sum())}"] = f"{res.label_error_rate * 100:.2f}"
        table_rows.append(row)
        print(f"finished {args.axis}={raw}")

    header = ["value"] + [k for k in table_rows[0] if k != "value"]
    lines = ["\t".join(header)]
    for row in table_rows:
        lines.append("\t".join(str(row[h]) for h in header))
    text = f"# sweep over {args.axis} (test LER %)\n" + "\n".join(lines) + "\n"
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "sweep.txt").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexdepth",
        description="Train one CTC encoder jointly with its layer-pruned "
                    "subnets; evaluate any trained size.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a training job")
    train.add_argument("--config", help="flat key = value config file")
    train.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
    train.add_argument("--out", required=True, help="run directory")
    train.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a finished run")
    ev.add_argument("--run", required=True)
    ev.add_argument("--split", default="test",
                    choices=("train", "dev", "test"))
    ev.add_argument("--size", default=None,
                    help="mask selector: full, aux, all, or a layer count")
    ev.add_argument("--checkpoint", default="final")
    ev.set_defaults(fn=cmd_eval)

    rep = sub.add_parser("layer-report",
                         help="kept-layer distribution per subnet")
    rep.add_argument("--run", help="run directory containing masks.txt")
    rep.add_argument("--masks", help="explicit mask export path")
    rep.add_argument("--svg", action="store_true",
                     help="also render stacked bars as SVG")
    rep.set_defaults(fn=cmd_layer_report)

    ver = sub.add_parser("verify", help="run the verification suites")
    ver.add_argument("--fast", action="store_true",
                     help="reduced instance counts")
    ver.set_defaults(fn=cmd_verify)

    sweep = sub.add_parser("sweep", help="ablation sweep over one axis")
    sweep.add_argument("--axis", required=True,
                       help="dropout | iterations | split")
    sweep.add_argument("--values", required=True,
                       help="comma-separated values")
    sweep.add_argument("--config")
    sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", 1)


if __name__ == "__main__":
    sys.exit(main())
