"""Turn a run's ``steps.jsonl`` into CSV series for external plotting.

Per run this writes

``pout_vs_step.csv``            step, p_out, pl_ter (unlabeled-branch steps)
``correlation_pairs.csv``       step, pl_ter, oracle_wer (unlabeled-branch steps)
``tau_vs_step.csv``             step, tau (every step)
``blank_fraction_vs_step.csv``  step, blank_fraction, pl_len_ratio
``report.json``                 Pearson r of the pairs, row counts, missing fields
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .trainer import oracle_correlation

REPORT_FORMAT = "cplab-report/1"

_SERIES = {
    "pout_vs_step": (("step", "p_out", "pl_ter"), "unlabeled"),
    "correlation_pairs": (("step", "pl_ter", "oracle_wer"), "unlabeled"),
    "tau_vs_step": (("step", "tau"), None),
    "blank_fraction_vs_step": (("step", "blank_fraction", "pl_len_ratio"), None),
}


def read_steps(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: bad JSON ({exc})") from None
    return rows


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def build_report(run_dir: str | Path, out_dir: str | Path) -> dict:
    """Write the series for one run directory; returns the report dict."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    records = read_steps(run_dir / "steps.jsonl")
    out_dir.mkdir(parents=True, exist_ok=True)
    missing: dict[str, list[str]] = {}
    counts: dict[str, int] = {}
    for name, (cols, branch) in _SERIES.items():
        pool = [r for r in records if branch is None or r.get("branch") == branch]
        absent = [c for c in cols if not any(r.get(c) is not None for r in pool)]
        if absent:
            missing[f"{name}.csv"] = absent
        needed = [c for c in cols if c not in absent]
        rows = [[r.get(c) for c in cols] for r in pool
                if all(r.get(c) is not None for c in needed)]
        if name == "correlation_pairs" and absent:
            rows = []
        _write_csv(out_dir / f"{name}.csv", cols, rows)
        counts[name] = len(rows)
    report = {
        "format": REPORT_FORMAT,
        "run_dir": str(run_dir),
        "n_steps": len(records),
        "n_unlabeled_steps": sum(r.get("branch") == "unlabeled" for r in records),
        "rows": counts,
        "pearson_r": oracle_correlation(records),
        "missing_fields": missing,
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    return report
