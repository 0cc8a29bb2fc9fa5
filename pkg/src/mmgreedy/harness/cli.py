"""Command-line front end: gen-data, train, sweep, diagnose, report.

Exit codes: 0 success, 1 a run or command failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..diagnose import UtilizationUndefined, compute_h_bar, utilization
from ..synthdata import GeneratorSpec, gen_duplicated, gen_shortcut_bimodal
from ..trainers import TrainConfig
from .io import FormatError, dataset_id, load_checkpoint, load_dataset, save_dataset, write_json
from .report import report
from .runner import net_spec_for, run_single
from .sweep import aggregate, l1_summary, load_sweep_spec, run_sweep

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def cmd_gen_data(args) -> int:
    spec = GeneratorSpec.from_dict(_read_json(args.spec)) if args.spec else GeneratorSpec()
    ds = gen_duplicated(spec, args.duplicate) if args.duplicate else gen_shortcut_bimodal(spec)
    save_dataset(ds, args.out)
    print(json.dumps({"dataset": str(args.out), "id": dataset_id(args.out), "kind": ds.kind}))
    return EXIT_OK


def cmd_train(args) -> int:
    conf = _read_json(args.config)
    data_path = args.data or conf.get("dataset")
    if not data_path:
        raise ValueError("no dataset: pass --data or set 'dataset' in the config")
    data = load_dataset(data_path)
    cfg = TrainConfig.from_dict(conf.get("train", {}))
    spec = net_spec_for(data, override=conf.get("net"))
    rec = run_single(data, cfg, conf.get("run_id", Path(args.out).name), dataset_id(data_path), args.out,
                     net_spec=spec, h_bar_source=conf.get("h_bar", "recomputed"),
                     speed_log=bool(conf.get("speed_log", False)))
    print(json.dumps(rec.to_dict()))
    return EXIT_OK if rec.status == "ok" else EXIT_FAIL


def cmd_sweep(args) -> int:
    spec = load_sweep_spec(args.spec)
    data_path = args.data or spec.dataset
    if not data_path:
        raise ValueError("no dataset: pass --data or set 'dataset' in the sweep spec")
    data = load_dataset(data_path)
    records = run_sweep(spec, data, args.out, args.jobs, dataset_id(data_path))
    summary = aggregate(records)
    if len(spec.l1s) > 1:
        summary["l1_study"] = l1_summary(records, spec.l1s)
        write_json(Path(args.out) / "l1_study.json", summary["l1_study"])
    print(json.dumps(summary))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    net = ckpt.build_net()
    kwargs = {}
    if args.h_bar == "recomputed":
        kwargs = {"h_bar": compute_h_bar(net, data.train), "h_bar_count": len(data.train)}
    rep = utilization(net, data.test, dataset=dataset_id(args.data), checkpoint=str(args.checkpoint), **kwargs)
    if args.out:
        write_json(Path(args.out), rep.to_dict())
    print(json.dumps(rep.to_dict()))
    return EXIT_OK


def cmd_report(args) -> int:
    summary = report(args.runs, args.out, args.hist)
    print(json.dumps(summary["aggregate"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmgreedy", description="Multi-modal greediness laboratory.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and save a dataset")
    g.add_argument("--spec", help="generator spec JSON (defaults used when omitted)")
    g.add_argument("--duplicate", choices=("m0", "m1"), help="duplicate one modality into both slots")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True, help="run config JSON: dataset, train, net, h_bar")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a seeded sweep")
    s.add_argument("--spec", required=True)
    s.add_argument("--data", help="dataset directory (overrides the spec)")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, help="parallel runs (default: $MMGREEDY_JOBS or CPU count)")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("diagnose", help="utilization report for a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--h-bar", choices=("recomputed", "running"), default="recomputed")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("report", help="aggregate run records into CSV and histograms")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--hist", help="histogram JSON path (default: next to the CSV)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (FileNotFoundError, FormatError, UtilizationUndefined, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
