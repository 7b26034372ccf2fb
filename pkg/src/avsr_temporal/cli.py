"""Command line: train, eval, gradcheck, report.

Exit codes: 0 success, 1 validation error, 2 numeric failure (non-finite
values or a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from .autodiff import AutodiffError, NumericError
from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .metrics import MetricError, aggregate, read_records

log = logging.getLogger("avsr_temporal")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ReportError(ValueError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(Path(args.config) if getattr(args, "config", None) else None)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_train(args) -> int:
    from .experiment import run_train

    cfg = _config(args)
    out = Path(args.out or cfg.paths.out_dir)
    summary = run_train(cfg, out)
    acc = summary["predictor_accuracy"]
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    print("final: " + " ".join(f"{k}={v:.4f}" for k, v in summary["final"].items())
          if summary["final"] else "final: (no steps)")
    print("held-out accuracy: " + " ".join(f"{k}={v:.3f}" for k, v in acc.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import run_eval
    from .metrics import nwer, nwer_noise_dominant

    cfg = _config(args)
    out = Path(args.out or Path(cfg.paths.out_dir) / ("eval_vsr" if args.video_only else "eval"))
    table = run_eval(cfg, Path(args.checkpoint), out, args.video_only, args.workers)
    print(f"{out / 'cells.jsonl'}: N-WER {nwer(table):.2f}  "
          f"N>=S {nwer_noise_dominant(table):.2f}  clean {table.clean:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    cfg = _config(args)
    results = run_suite(seed=cfg.train.seed)
    for r in results:
        bound = "== 0" if r.kind == "zero" else f"< {TOLERANCE:g}"
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.error:.3e}  ({bound})")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def _records_path(p: Path) -> Path:
    return p / "cells.jsonl" if p.is_dir() else p


def build_report(paths: list[Path]) -> str:
    """Ablation-style comparison: one row per label in input order, AVSR
    noise-dominant WER per noise source, N-WER, and the video-only WER."""
    rows: dict[str, dict] = {}
    grid = None
    for p in paths:
        table, stored, meta = read_records(_records_path(p))
        keys = sorted(table.cells)
        if grid is None:
            grid = keys
        elif keys != grid:
            raise ReportError(f"{p}: noise grid differs from {paths[0]}")
        fresh = aggregate(table)
        if (fresh.nwer != stored.nwer or fresh.nwer_noise_dominant != stored.nwer_noise_dominant
                or fresh.category_avg != stored.category_avg
                or fresh.category_noise_dominant != stored.category_noise_dominant):
            raise ReportError(f"{p}: stored aggregates disagree with its cells")
        label = meta.get("label", str(p))
        row = rows.setdefault(label, {})
        if meta.get("mode") == "vsr":
            row["vsr"] = table.clean
        else:
            if "avsr" in row:
                raise ReportError(f"{p}: second AVSR result for label {label!r}")
            row["avsr"] = fresh
    cats: list[str] = []
    for r in rows.values():
        if "avsr" in r:
            cats = list(r["avsr"].category_noise_dominant)
            break
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["config"] + [f"{c}:N>=S" for c in cats] + ["N-WER:N>=S", "N-WER:AVG", "VSR"])
    for label, r in rows.items():
        a = r.get("avsr")
        cells = [f"{a.category_noise_dominant[c]:.2f}" if a else "-" for c in cats]
        cells += [f"{a.nwer_noise_dominant:.2f}", f"{a.nwer:.2f}"] if a else ["-", "-"]
        cells.append(f"{r['vsr']:.2f}" if r.get("vsr") is not None else "-")
        w.writerow([label] + cells)
    return buf.getvalue()


def cmd_report(args) -> int:
    text = build_report([Path(p) for p in args.outputs])
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="avsr-temporal", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: [paths] out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the noise grid")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video-only", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory for cells.jsonl and table.tsv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="compare several eval outputs")
    p.add_argument("outputs", nargs="+")
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AutodiffError, CheckpointError, MetricError, ReportError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
