"""Command-line entry point: ``python -m promptcl <command> ...``.

Exit codes: 0 success, 1 usage error, 2 config error, 3 data or weight file
error, 4 non-finite numbers during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path):
    from .config import Config, load_config

    if path is None:
        return Config()
    try:
        return load_config(path)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None


def _dataset(cfg, data_path=None):
    from .data import generate_synthetic, read_dataset

    if data_path is not None:
        return read_dataset(data_path)
    s = cfg["stream"]
    return generate_synthetic(s["n_classes"], s["n_train"], s["n_test"], cfg.grating(), s["data_seed"])


def _upstream(cfg):
    from .data import generate_synthetic

    b = cfg["backbone"]
    return generate_synthetic(b["pretrain_classes"], b["pretrain_train"], b["pretrain_test"], cfg.grating(),
                              b["pretrain_data_seed"])


def _stream(cfg, dataset):
    from .data import split_stream

    s = cfg["stream"]
    return split_stream(dataset, s["n_tasks"], s["stream_seed"], s["fine_grained"])


def _backbone(cfg, weights):
    from .backbone import load_backbone
    from .engine import pretrain_backbone

    if weights is not None:
        return load_backbone(weights, cfg.vit())
    return pretrain_backbone(_upstream(cfg), cfg.vit(), cfg.finetune(), cfg["backbone"]["pretrain_seed"])


def _write_json(path, obj):
    from .fileio import atomic_write_text

    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import write_dataset

    cfg = _load_config(args.config)
    if args.seed is not None:
        key = "pretrain_data_seed" if args.upstream else "data_seed"
        cfg[("backbone" if args.upstream else "stream")][key] = args.seed
    ds = _upstream(cfg) if args.upstream else _dataset(cfg)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds)} samples of {ds.n_classes} classes to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .data import read_dataset
    from .engine import pretrain_backbone
    from .finetune import probe_accuracy

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["backbone"]["pretrain_seed"] = args.seed
    up = read_dataset(args.data) if args.data else _upstream(cfg)
    seed = cfg["backbone"]["pretrain_seed"]
    state = pretrain_backbone(up, cfg.vit(), cfg.finetune(), seed, path=args.out)
    acc = probe_accuracy(state, up, np.flatnonzero(up.split == 0), np.flatnonzero(up.split == 1))
    print(f"wrote {state.n_params()} weights to {args.out}; upstream probe accuracy {100 * acc:.1f}%")
    return EXIT_OK


def _run_one(cfg, args, dataset, stream, backbone):
    from .analysis import select_reg_strength
    from .engine import run_stream

    method, train = cfg.method(), cfg.train()
    selection = None
    if cfg["reg"]["select"] and train.reg_kind != "none":
        best, scores = select_reg_strength(dataset, stream, backbone, method, train, cfg["reg"]["candidates"])
        train = replace(train, reg_strength=best)
        selection = {"chosen": best, "scores": {repr(k): list(v) for k, v in scores.items()}}
    rec = run_stream(dataset, stream, backbone, method, train, checkpoint=getattr(args, "checkpoint", None),
                     resume=getattr(args, "resume", None), stop_after=getattr(args, "stop_after", None))
    rec.config["resolved"] = cfg.resolved()
    if selection is not None:
        rec.config["reg_selection"] = selection
    return rec


def cmd_run(args) -> int:
    from .analysis import emit_report
    from .fileio import atomic_write_text

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["train"]["train_seed"] = args.seed
    dataset = _dataset(cfg, args.data)
    stream = _stream(cfg, dataset)
    backbone = _backbone(cfg, args.weights)
    rec = _run_one(cfg, args, dataset, stream, backbone)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_text, _ = emit_report([rec])
    atomic_write_text(out / "record.json", rec.to_json())
    atomic_write_text(out / "results.csv", csv_text)
    state = "finished" if rec.complete else f"stopped after task {len([r for r in rec.acc if r[0] is not None]) - 1}"
    if rec.complete:
        print(f"{rec.run_id}: {state}, final accuracy {100 * rec.final_acc:.2f}%")
    else:
        print(f"{rec.run_id}: {state}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .analysis import emit_report, sweep, sweep_trends
    from .fileio import atomic_write_text

    cfg = _load_config(args.config)
    grid = cfg["sweep"]["grid"]
    if args.params:
        try:
            grid = [int(x) for x in args.params.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"--params must be comma-separated integers, got {args.params!r}") from None
    seeds = [args.seed] if args.seed is not None else cfg["sweep"]["seeds"]
    dataset = _dataset(cfg, args.data)
    stream = _stream(cfg, dataset)
    backbone = _backbone(cfg, args.weights)
    try:
        result, records = sweep(dataset, stream, backbone, grid, seeds, cfg.method(), cfg.train(), jobs=args.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for rec in records.values():
        rec.config["resolved"] = cfg.resolved()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ordered = [records[k] for k in sorted(records)]
    csv_text, json_text = emit_report(ordered)
    atomic_write_text(out / "sweep.csv", result.to_csv())
    atomic_write_text(out / "results.csv", csv_text)
    atomic_write_text(out / "summary.json", json_text)
    failed = [p for p in result.points if p.status != "ok"]
    if len(seeds) >= 1 and not failed and len(grid) >= 3:
        tr = sweep_trends(result)
        print(f"adaptation rho {tr.adaptation_rho:+.3f}, upper-half forgetting rho {tr.forgetting_rho_upper:+.3f}, "
              f"best interior {tr.best_interior} (+{tr.interior_margin:.2f} pp over endpoints)")
    print(f"{len(result.points)} sweep points, {len(failed)} failed; wrote {out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .analysis import prune_pool
    from .engine import StreamRunner

    cfg = _load_config(args.config)
    dataset = _dataset(cfg, args.data)
    stream = _stream(cfg, dataset)
    backbone = _backbone(cfg, args.weights)
    runner = StreamRunner(dataset, stream, backbone, cfg.method(), cfg.train())
    runner.load_checkpoint(args.checkpoint)
    report = {"tasks_done": runner.t, "method": cfg.method().label, "p_sim": runner.prompt_similarity()}
    if runner.prompt is not None and runner.prompt.strategy == "pool" and runner.t > 0:
        pr = prune_pool(runner, args.prune, 0 if args.seed is None else args.seed)
        report["prune"] = {"fraction": args.prune, "kept": list(pr.kept), "acc_before": pr.acc_before,
                           "acc_after": pr.acc_after, "p_sim_after": pr.p_sim_after}
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if args.out:
        _write_json(args.out, report)
    print(text, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .analysis import emit_report, load_report, render_table, summary_table
    from .engine import RunRecord
    from .fileio import atomic_write_text

    records = []
    for path in args.inputs:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path} is not JSON: {exc.msg}", exc.pos) from None
        try:
            records.extend(load_report(json.dumps(data)) if "records" in data else [RunRecord.from_dict(data)])
        except TypeError as exc:
            raise FormatError(f"{path} does not hold run records: {exc}") from None
    records.sort(key=lambda r: (r.method, r.n_params_prompt, r.seed, r.run_id))
    try:
        csv_text, json_text = emit_report(records)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    table = render_table(summary_table(records))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.csv", csv_text)
    atomic_write_text(out / "summary.json", json_text)
    atomic_write_text(out / "table.txt", table)
    print(table, end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptcl", description="Prompt-based class-incremental learning experiments on a tiny ViT.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_help):
        sp.add_argument("--config", help="experiment config file ([section] / key = value)")
        sp.add_argument("--seed", type=int, help=seed_help)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CILB")
    common(g, "override the data seed")
    g.add_argument("--out", required=True, help="output CILB path")
    g.add_argument("--upstream", action="store_true", help="write the upstream pretraining set instead")
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="pretrain the backbone on upstream data and write PTW1 weights")
    common(g, "override the pretraining seed")
    g.add_argument("--out", required=True, help="output PTW1 path")
    g.add_argument("--data", help="upstream CILB file (default: generate from config)")
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("run", help="train one method over the task stream")
    common(g, "override the training seed")
    g.add_argument("--out", required=True, help="output directory for record.json and results.csv")
    g.add_argument("--weights", help="PTW1 backbone (default: pretrain from config)")
    g.add_argument("--data", help="stream CILB file (default: generate from config)")
    g.add_argument("--checkpoint", help="rewrite this CKP1 file after every task")
    g.add_argument("--resume", help="continue from a CKP1 file")
    g.add_argument("--stop-after", type=int, dest="stop_after", help="stop once this task index is trained")
    g.set_defaults(func=cmd_run)

    g = sub.add_parser("sweep", help="OnlyPrompt parameter-count sweep with a linear-probe reference")
    common(g, "run only this training seed instead of the configured seeds")
    g.add_argument("--out", required=True, help="output directory for sweep.csv, results.csv, summary.json")
    g.add_argument("--weights", help="PTW1 backbone (default: pretrain from config)")
    g.add_argument("--data", help="stream CILB file (default: generate from config)")
    g.add_argument("--params", help="comma-separated prompt parameter counts overriding [sweep] grid")
    g.add_argument("--jobs", type=int, default=1, help="concurrent runs (default 1)")
    g.set_defaults(func=cmd_sweep)

    g = sub.add_parser("diagnose", help="prompt similarity and pool pruning from a checkpoint")
    common(g, "pruning seed")
    g.add_argument("--checkpoint", required=True, help="CKP1 file written by run")
    g.add_argument("--weights", help="PTW1 backbone (default: pretrain from config)")
    g.add_argument("--data", help="stream CILB file (default: generate from config)")
    g.add_argument("--prune", type=float, default=0.3, help="fraction of pool prompts to drop (default 0.3)")
    g.add_argument("--out", help="also write the diagnosis as JSON here")
    g.set_defaults(func=cmd_diagnose)

    g = sub.add_parser("report", help="aggregate run records into mean (±std) tables")
    g.add_argument("inputs", nargs="+", help="record.json or summary.json files")
    g.add_argument("--out", required=True, help="output directory for report.csv, summary.json, table.txt")
    g.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
