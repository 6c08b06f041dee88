"""Command line entry point: ``revgn {train,verify,analyze,plot,sweep-report}``.

Exit codes: 0 success, 1 a check or run failed, 2 bad usage or input.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, data, oracle, plot, revnet, training
from .config import ConfigError, load_config

log = logging.getLogger("revgn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_train(args):
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise UsageError(f"config error: {exc}") from exc
    try:
        results = training.train(cfg, workers=args.workers)
    except (OSError, data.DataFormatError) as exc:
        raise UsageError(f"dataset error: {exc}") from exc
    failed = [r for r in results if r.status != "ok"]
    for r in results:
        last = [row for row in r.rows if row["status"] == "ok"]
        loss = f"{last[-1]['train_loss']:.4g}" if last else "n/a"
        print(f"lr={r.lr:g} seed={r.seed} status={r.status} final_train_loss={loss}"
              + (f" steps_to_target={r.steps_to_target}" if cfg.target_acc else ""))
    print(f"wrote {Path(cfg.output) / 'metrics.csv'}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_verify(args):
    level = "full" if args.full else "fast"
    t0 = time.perf_counter()
    reports = oracle.run_suite(level, seed=args.seed)
    failed = 0
    lines = []
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{status} {rep.check} {json.dumps(rep.instance_params, sort_keys=True)}")
        lines.append(rep.to_json())
    if args.json:
        Path(args.json).write_text("\n".join(lines) + "\n")
    print(f"{len(reports) - failed}/{len(reports)} checks passed in "
          f"{time.perf_counter() - t0:.1f}s ({level})")
    return EXIT_FAIL if failed else EXIT_OK


def _probe_for(model, args):
    if args.dataset == "synthetic":
        train, _ = data.synthetic_regression(model.d, max(args.probe_size, 8))
    else:
        train, _ = data.load_named(args.dataset, args.data_path)
    if train.d != model.d:
        raise UsageError(f"dataset width {train.d} does not match model width {model.d}")
    probe = analysis.make_probe(train, args.probe_size, args.probe_seed)
    return analysis.ProbeSet(probe.x, model.d_y, probe.seed)


def cmd_analyze(args):
    paths = sorted(glob.glob(args.checkpoints))
    if not paths:
        raise UsageError(f"no checkpoints match {args.checkpoints!r}")
    ref_path = args.against or paths[0]
    try:
        ref, _ = revnet.load_checkpoint(ref_path)
        models = [(p, *revnet.load_checkpoint(p)) for p in paths]
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    arch = (ref.d, ref.d_prime, ref.n_blocks, ref.d_y)
    for p, m, _ in models:
        if (m.d, m.d_prime, m.n_blocks, m.d_y) != arch:
            raise UsageError(f"{p}: architecture {(m.d, m.d_prime, m.n_blocks, m.d_y)} "
                             f"differs from reference {arch}")
    try:
        probe = _probe_for(ref, args)
    except (OSError, data.DataFormatError) as exc:
        raise UsageError(f"dataset error: {exc}") from exc
    theta0 = analysis.ntk(ref, probe)
    theta_prev = None
    rows = []
    for p, m, meta in models:
        metrics, theta_prev = analysis.compare_to_reference(m, ref, probe, theta0, theta_prev)
        row = {"run_id": meta.get("run_id", Path(p).parent.name), "seed": meta.get("seed", ""),
               "epoch": meta.get("epoch", ""), "step": m.step, "status": "ok",
               "optimizer": "analysis", "lr": ""}
        row.update({k: v for k, v in metrics.items()})
        rows.append(row)
        print(f"{p}: ntk_similarity={metrics['ntk_similarity']:.6f} "
              f"cka={';'.join(f'{c:.6f}' for c in metrics['cka'])}")
    training.write_rows(args.out, rows)
    print(f"appended {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_plot(args):
    try:
        written = plot.plot_csv(args.csv, args.out, args.metric or None)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    for p in written:
        print(p)
    return EXIT_OK


def cmd_sweep_report(args):
    try:
        rows = training.read_rows(args.csv)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    report = training.sweep_report(rows)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="revgn", description="Exact Gauss-Newton training for reversible MLPs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("config")
    t.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run the dense linear-algebra checks")
    v.add_argument("--full", action="store_true", help="include the step-size scaling study")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json", help="write one JSON report per line to this file")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("analyze", help="NTK/CKA/weight-cosine metrics of checkpoints")
    a.add_argument("checkpoints", help="glob of checkpoint files")
    a.add_argument("--against", help="reference checkpoint (default: first match)")
    a.add_argument("--dataset", default="mnist")
    a.add_argument("--data-path")
    a.add_argument("--probe-size", type=int, default=100)
    a.add_argument("--probe-seed", type=int, default=0)
    a.add_argument("--out", default="analysis.csv")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plot", help="render SVG curves from a metrics CSV")
    pl.add_argument("csv")
    pl.add_argument("--out", required=True)
    pl.add_argument("--metric", action="append", choices=sorted(plot.METRICS))
    pl.set_defaults(func=cmd_plot)

    s = sub.add_parser("sweep-report", help="largest non-diverging learning rate per optimizer")
    s.add_argument("csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"revgn: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
