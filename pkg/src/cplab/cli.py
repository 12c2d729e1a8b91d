"""Command line entry point: ``cplab {gen-data,train,sweep,report}``.

Exit codes
----------
0  finished without divergence or errors
1  I/O error (missing corpus, unreadable file, a failed sweep run)
2  invalid configuration or command line
3  the run diverged (logs and summary are still written)

Any config field can be overridden with ``--section.field VALUE`` (for
example ``--trainer.M 0`` or ``--encoder.hidden_dims "[64, 64]"``); values
are parsed as YAML scalars and checked against the field type.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import yaml

from .config import ConfigError, ExperimentConfig, field_paths, from_dict, load_config
from .data import generate_corpus, save_corpus
from .experiment import load_or_generate_corpus, run_experiment
from .report import build_report

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DV = 0, 1, 2, 3

log = logging.getLogger("cplab")

RUN_COLUMNS = ("cell", "seed", "status", "dv", "steps", "dev_ter", "dev_wer", "test_ter",
               "test_wer", "oracle_correlation", "run_dir", "error")
METRICS = ("dev_ter", "dev_wer", "test_ter", "test_wer")


def _add_overrides(p: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    g = p.add_argument_group("config overrides")
    for path in field_paths():
        if path in skip:
            continue
        g.add_argument(f"--{path}", dest=f"ov:{path}", metavar="VALUE", default=argparse.SUPPRESS)


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    return {k[3:]: v for k, v in vars(args).items() if k.startswith("ov:")}


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    ov = _overrides(args)
    return cfg.with_overrides(ov) if ov else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cplab", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--config", help="experiment YAML (defaults when omitted)")
    p.add_argument("--out", help="output directory (default: data_dir from the config)")
    _add_overrides(p)

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="master seed (default: trainer.seed)")
    p.add_argument("--run-dir", help="default: <output_dir>/<name>/seed_<N>")
    p.add_argument("--name", default="run")
    _add_overrides(p)

    p = sub.add_parser("sweep", help="run a grid of cells over several seeds")
    p.add_argument("--config", help="base experiment YAML")
    p.add_argument("--grid", required=True, help="YAML with 'cells' and optional 'seeds'")
    p.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
    p.add_argument("--out", help="sweep directory (default: <output_dir>/sweep)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    _add_overrides(p, skip=("seeds",))

    p = sub.add_parser("report", help="extract CSV series from run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.data_dir)
    corpus = generate_corpus(cfg.corpus)
    save_corpus(corpus, out)
    print(f"wrote corpus to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = cfg.trainer.seed if args.seed is None else args.seed
    run_dir = Path(args.run_dir) if args.run_dir else Path(cfg.output_dir) / args.name / f"seed_{seed}"
    corpus = load_or_generate_corpus(cfg)
    _, summary = run_experiment(cfg, corpus, run_dir, seed=seed)
    print(f"{summary['status']} dev_ter={summary['dev_ter']:.4f} "
          f"test_ter={summary['test_ter']:.4f} -> {run_dir}")
    return EXIT_DV if summary["dv"] else EXIT_OK


def load_grid(path: str | Path) -> tuple[dict[str, dict], list[int] | None]:
    with open(path) as fh:
        grid = yaml.safe_load(fh) or {}
    if not isinstance(grid, dict) or set(grid) - {"version", "cells", "seeds"}:
        raise ConfigError("grid file takes only 'version', 'cells' and 'seeds'")
    if grid.get("version", 1) != 1:
        raise ConfigError(f"unsupported grid version {grid.get('version')!r}")
    cells = grid.get("cells")
    if not isinstance(cells, dict) or not cells:
        raise ConfigError("grid needs a non-empty 'cells' mapping")
    for name, ov in cells.items():
        if ov is not None and not isinstance(ov, dict):
            raise ConfigError(f"cell {name!r} must map dotted keys to values")
    return {str(k): dict(v or {}) for k, v in cells.items()}, grid.get("seeds")


def _sweep_job(base: dict, cell: str, overrides: dict, seed: int, run_dir: str) -> dict:
    row = {"cell": cell, "seed": seed, "run_dir": run_dir}
    try:
        cfg = from_dict(base).with_overrides(overrides)
        corpus = load_or_generate_corpus(cfg)
        _, summary = run_experiment(cfg, corpus, run_dir, seed=seed)
        row.update({k: summary.get(k) for k in RUN_COLUMNS if k in summary})
    except Exception as exc:  # recorded per cell, the sweep carries on
        row.update(status="ERROR", error=f"{type(exc).__name__}: {exc}")
    return row


def summarize_sweep(rows: Sequence[dict]) -> list[dict]:
    out = []
    for cell in dict.fromkeys(r["cell"] for r in rows):
        mine = [r for r in rows if r["cell"] == cell]
        done = [r for r in mine if r.get("status") in ("OK", "DV")]
        agg = {
            "cell": cell,
            "n_runs": len(mine),
            "n_ok": sum(r["status"] == "OK" for r in mine),
            "n_dv": sum(r["status"] == "DV" for r in mine),
            "n_error": sum(r["status"] == "ERROR" for r in mine),
        }
        for m in METRICS:
            vals = [float(r[m]) for r in done if r.get(m) is not None]
            agg[f"{m}_mean"] = statistics.fmean(vals) if vals else None
            agg[f"{m}_std"] = statistics.stdev(vals) if len(vals) > 1 else (0.0 if vals else None)
        out.append(agg)
    return out


def _write_rows(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: ("" if r.get(c) is None else r.get(c)) for c in columns})


def cmd_sweep(args) -> int:
    base = _config(args)
    cells, grid_seeds = load_grid(args.grid)
    seeds = args.seeds or grid_seeds or base.seeds
    out = Path(args.out or Path(base.output_dir) / "sweep")
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(base.to_dict(), cell, ov, int(s), str(out / cell / f"seed_{s}"))
            for cell, ov in cells.items() for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(_sweep_job, *zip(*jobs)))
    else:
        rows = [_sweep_job(*j) for j in jobs]
    for r in rows:
        log.info("%s seed %s: %s", r["cell"], r["seed"], r.get("status"))
    _write_rows(out / "runs.csv", rows, RUN_COLUMNS)
    summary = summarize_sweep(rows)
    cols = ["cell", "n_runs", "n_ok", "n_dv", "n_error"] + [
        f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    _write_rows(out / "summary.csv", summary, cols)
    for s in summary:
        mean, std = s["dev_ter_mean"], s["dev_ter_std"]
        txt = "n/a" if mean is None else f"{mean:.4f} +- {std:.4f}"
        print(f"{s['cell']:<20} dev_ter {txt}  DV {s['n_dv']}/{s['n_runs']}  errors {s['n_error']}")
    return EXIT_IO if any(r["status"] == "ERROR" for r in rows) else EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    code = EXIT_OK
    for rd in args.run_dirs:
        rd = Path(rd)
        name = "_".join(rd.resolve().parts[-2:])
        try:
            rep = build_report(rd, out / name)
        except (OSError, ValueError) as exc:
            print(f"{rd}: {exc}", file=sys.stderr)
            code = EXIT_IO
            continue
        for fname, cols in rep["missing_fields"].items():
            print(f"{rd}: {fname} has no values for {', '.join(cols)}", file=sys.stderr)
        r = rep["pearson_r"]
        print(f"{rd}: pearson_r={'undefined' if r is None else f'{r:.4f}'} -> {out / name}")
    return code


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
