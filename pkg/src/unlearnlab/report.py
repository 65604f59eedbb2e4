"""Summary tables and norm traces built from persisted experiment artifacts."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

from .errors import ReportError
from .metrics import asr_from_outcomes, mean_std

GROUP_KEYS = ("fu_mode", "aggregation", "dataset", "epsilon_fraction", "ratio")
METRICS = ("asr_b", "asr", "acc_g", "acc_g_unlearned", "asr_defended")

_STAGE_FILES = {"data": "partition.json", "train": "archive/manifest.json",
                "attack": "targets.json", "evaluate": "bundle.json"}


def _missing_stages(run_dir: Path) -> list[str]:
    return [stage for stage, rel in _STAGE_FILES.items() if not (run_dir / rel).exists()]


def _row_metrics(bundle: dict) -> dict[str, float]:
    """Recompute each metric from the stored per-target outcomes where possible."""
    out = {
        "asr": asr_from_outcomes(bundle["outcomes"]),
        "asr_b": asr_from_outcomes(bundle["benign_outcomes"]),
        "acc_g": float(bundle["acc_g"]),
        "acc_g_unlearned": _mean_acc(bundle["outcomes"]),
    }
    if bundle.get("defense"):
        out["asr_defended"] = asr_from_outcomes(bundle["defense"]["outcomes"])
    return out


def _mean_acc(outcomes) -> float:
    vals = [o["acc_unlearned"] for o in outcomes]
    return sum(vals) / len(vals)


def report(output_dir, summary_name: str = "summary.csv", norms_name: str = "norms.csv") -> Path:
    """Write a grouped mean/std table and a concatenated per-round norm trace.

    Every run directory (one containing ``config.ini``) below ``output_dir``
    must hold a complete set of stage artifacts. Standard deviations are
    population deviations over repetitions. Returns the summary path.
    """
    root = Path(output_dir)
    if not root.is_dir():
        raise ReportError(f"{root} is not a directory")
    runs = sorted(p.parent for p in root.rglob("config.ini"))
    if not runs:
        raise ReportError(f"no experiment runs under {root}")
    problems = {str(r.relative_to(root)): _missing_stages(r) for r in runs}
    problems = {k: v for k, v in problems.items() if v}
    if problems:
        detail = "; ".join(f"{k}: missing {', '.join(v)}" for k, v in sorted(problems.items()))
        raise ReportError(f"incomplete runs ({detail})")

    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in runs:
        bundle = json.loads((r / "bundle.json").read_text())
        key = tuple(bundle["group"][k] for k in GROUP_KEYS)
        groups[key].append(_row_metrics(bundle))

    summary = root / summary_name
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = list(GROUP_KEYS) + ["repetitions"]
        for m in METRICS:
            header += [f"{m}_mean", f"{m}_std"]
        w.writerow(header)
        for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
            rows = groups[key]
            line = list(key) + [len(rows)]
            for m in METRICS:
                vals = [row[m] for row in rows if m in row]
                if vals:
                    mu, sd = mean_std(vals)
                    line += [repr(mu), repr(sd)]
                else:
                    line += ["", ""]
            w.writerow(line)

    with open(root / norms_name, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "target", "round", "client", "norm", "flagged"])
        for r in runs:
            for trace in sorted((r / "defend").glob("norms_*.csv")) if (r / "defend").is_dir() else []:
                target = trace.stem[len("norms_"):]
                with open(trace, newline="", encoding="utf-8") as src:
                    rd = csv.reader(src)
                    next(rd, None)
                    for row in rd:
                        w.writerow([str(r.relative_to(root)), target] + row)
    return summary
