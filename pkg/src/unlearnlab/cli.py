"""Command line entry point: ``unlearnlab <stage> [--config FILE] [--section.key VALUE ...]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import LabError, StageError
from .experiment import ExperimentConfig, Pipeline, load_config
from .report import report

STAGES = {
    "train": "train the federation and persist the history archive",
    "unlearn": "benign unlearning of the selected samples (ASR-B)",
    "attack": "malicious unlearning with crafted samples (ASR)",
    "defend": "malicious unlearning with the norm-outlier defense",
    "evaluate": "run every stage and write the metrics bundle",
}
_TOP = {"name": "name", "seed": "seed", "repetitions": "repetitions",
        "output-dir": "output_dir", "fu-mode": "fu_mode", "save-models": "save_models"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment file (defaults apply when omitted)")
    for flag, key in _TOP.items():
        p.add_argument(f"--{flag}", dest=key, default=None)
    base = ExperimentConfig()
    for section in ExperimentConfig.SECTIONS:
        group = p.add_argument_group(section)
        for f in dataclasses.fields(getattr(base, section)):
            group.add_argument(f"--{section}.{f.name}", dest=f"{section}.{f.name}", default=None,
                               metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in STAGES.items():
        _add_config_flags(sub.add_parser(name, help=help_text))
    rp = sub.add_parser("report", help="summarise completed runs into CSV tables")
    rp.add_argument("directory")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {k: v for k, v in vars(args).items()
                     if v is not None and (k in _TOP.values() or "." in k)}
        return cfg.with_overrides(overrides) if overrides else cfg
    except (LabError, ValueError, OSError) as exc:
        raise StageError("config", exc) from exc


def _run_stage(command: str, cfg: ExperimentConfig) -> list[dict]:
    results = []
    for i, seed in enumerate(cfg.seeds()):
        rep_cfg = cfg.for_seed(seed)
        out = Path(cfg.output_dir) / f"rep_{i:02d}_seed_{seed}"
        out.mkdir(parents=True, exist_ok=True)
        rep_cfg.write_ini(out / "config.ini")
        pipe = Pipeline(rep_cfg, out)
        row: dict = {"seed": seed, "dir": str(out)}
        if command == "train":
            pipe.train()
            row["acc_g"] = pipe.acc_g
        elif command == "unlearn":
            pipe.benign()
            row["asr_b"] = sum(o.success for o in pipe.benign_outcomes) / len(pipe.benign_outcomes)
        elif command == "attack":
            pipe.attack()
            row["asr"] = sum(o.success for o in pipe.attack_outcomes) / len(pipe.attack_outcomes)
        elif command == "defend":
            pipe.defend()
            row["defense"] = {k: v for k, v in (pipe.defense_summary or {}).items() if k != "outcomes"}
        else:
            b = pipe.evaluate()
            row.update(asr=b.asr, asr_b=b.asr_b, acc_g=b.acc_g, acc_g_unlearned=b.acc_g_unlearned)
        results.append(row)
    return results


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            try:
                path = report(args.directory)
            except (LabError, OSError, ValueError) as exc:
                raise StageError("report", exc) from exc
            print(path)
            return 0
        cfg = _config_from_args(args)
        for row in _run_stage(args.command, cfg):
            print(json.dumps(row))
        return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
