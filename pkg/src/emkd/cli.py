"""Command line entry point: ``emkd <command> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import checks, config, data, harness, metrics, nets

log = logging.getLogger("emkd")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _gen_data(args) -> int:
    spec = config.load(data.DatasetSpec, args.spec) if args.spec else data.DatasetSpec()
    ds = data.generate(spec)
    data.write_dataset(ds, args.out)
    n_slices = sum(len(c.images) for c in ds.cases)
    log.info("wrote %d cases (%d slices) to %s", len(ds.cases), n_slices, args.out)
    return EXIT_OK


def _load_cfg(args) -> harness.TrainConfig:
    cfg = harness.load_config(args.config)
    if args.data:
        cfg = replace(cfg, data=args.data)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if not cfg.data:
        raise config.ConfigFileError("no dataset given: set 'data' in the config or pass --data")
    return cfg


def _train(args) -> int:
    cfg = _load_cfg(args)
    _, rep = harness.train_teacher(cfg, out_dir=args.out)
    log.info("%s: final dice %s, wrote %s", rep.role, rep.final_dice(), args.out)
    return EXIT_OK


def _distill(args) -> int:
    cfg = _load_cfg(args)
    _, rep = harness.distill_student(cfg, args.teacher, out_dir=args.out)
    log.info("%s: final dice %s, wrote %s", harness.run_label(rep), rep.final_dice(), args.out)
    return EXIT_OK


def _eval(args) -> int:
    net = nets.load_network(args.model)
    ds = data.read_dataset(args.data)
    if args.split == "all":
        cases = ds.cases
    else:
        train_ids, test_ids = data.make_folds(ds.case_ids(), args.folds, args.seed)[args.fold]
        cases = ds.by_id(test_ids if args.split == "test" else train_ids)
    rows = harness.evaluate(net, cases, ds.spec.window, args.voe_variant)
    metrics.write_metrics_csv(args.out, rows)
    for row in metrics.summary_rows(rows):
        log.info("class %s dice %s voe %s", row["class"], row["dice"], row["voe"])
    return EXIT_OK


def _gradcheck(args) -> int:
    ops = args.op or None
    if ops:
        unknown = [o for o in ops if o not in checks.GRAD_CASES and o not in checks.ORACLE_CASES]
        if unknown:
            log.error("unknown op(s): %s; choose from %s", ", ".join(unknown),
                      ", ".join(sorted(set(checks.GRAD_CASES) | set(checks.ORACLE_CASES))))
            return EXIT_USAGE
    results = []
    if not args.oracle_only:
        names = [o for o in ops if o in checks.GRAD_CASES] if ops else None
        if names != []:
            results += checks.grad_suite(names, instances=args.instances, seed=args.seed)
    if not args.grad_only:
        names = [o for o in ops if o in checks.ORACLE_CASES] if ops else None
        if names != []:
            results += checks.oracle_suite(names, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed or not results else EXIT_OK


def _report(args) -> int:
    rows = harness.report(args.runs, tail=args.tail, cls=args.cls)
    if not rows:
        log.error("no run reports found")
        return EXIT_FAIL
    print(harness.format_report(rows))
    if args.csv:
        harness.write_report_csv(args.csv, rows)
    return EXIT_OK


def _ablate(args) -> int:
    cfg = _load_cfg(args)
    ds = data.read_dataset(cfg.data)
    teacher = nets.load_network(args.teacher)
    targets = harness.TeacherTargets(teacher)
    out = Path(args.out)
    for label, w in harness.ablation_grid(cfg.weights):
        run_cfg = replace(cfg, alpha=w.alpha, beta1=w.beta1, beta2=w.beta2)
        _, rep = harness.distill_student(run_cfg, teacher, out / label, dataset=ds, targets=targets)
        log.info("%s: final dice %s", label, rep.final_dice())
    print(harness.format_report(harness.report(sorted(p for p in out.iterdir() if p.is_dir()),
                                               tail=args.tail)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emkd", description="Segmentation knowledge-distillation lab.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic CT-like dataset")
    g.add_argument("--spec", help="dataset spec file (key = value); defaults if omitted")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_data)

    def run_args(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--data", help="override the config's dataset path")
        sp.add_argument("--seed", type=int, help="override the config's seed")

    t = sub.add_parser("train", help="train a network with the segmentation loss only")
    run_args(t)
    t.set_defaults(func=_train)

    d = sub.add_parser("distill", help="train the student against a frozen teacher")
    run_args(d)
    d.add_argument("--teacher", required=True, help="teacher model file (.emkm)")
    d.set_defaults(func=_distill)

    a = sub.add_parser("ablate", help="distill every on/off subset of the three modules")
    run_args(a)
    a.add_argument("--teacher", required=True)
    a.add_argument("--tail", type=int, default=1)
    a.set_defaults(func=_ablate)

    e = sub.add_parser("eval", help="per-case metrics of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--out", required=True, help="CSV output path")
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--seed", type=int, default=0, help="fold assignment seed")
    e.add_argument("--voe-variant", choices=("as_printed", "union"), default="as_printed")
    e.set_defaults(func=_eval)

    c = sub.add_parser("gradcheck", help="finite-difference and reference-oracle checks")
    c.add_argument("--op", action="append", help="restrict to this check (repeatable)")
    c.add_argument("--instances", type=int, default=20, help="random instances per gradient check")
    c.add_argument("--seed", type=int, default=0)
    only = c.add_mutually_exclusive_group()
    only.add_argument("--grad-only", action="store_true")
    only.add_argument("--oracle-only", action="store_true")
    c.set_defaults(func=_gradcheck)

    r = sub.add_parser("report", help="compare runs as a - b ranges, sorted by Dice")
    r.add_argument("runs", nargs="+", help="run directories containing report.json")
    r.add_argument("--tail", type=int, default=1, help="aggregate over the last N epochs")
    r.add_argument("--cls", type=int, default=1, help="class id to report")
    r.add_argument("--csv", help="also write the table as CSV")
    r.set_defaults(func=_report)
    return p


def _limit_threads():
    value = os.environ.get("EMKD_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise SystemExit(f"EMKD_THREADS must be an integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
