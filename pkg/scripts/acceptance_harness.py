#!/usr/bin/env python3
"""Run the scaled replication studies in evals/acceptance_studies.json and score them."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Any

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.config import ScenarioConfig, parse_run_config  # noqa: E402
from app.pipeline import fit_study, report_study, simulate_study  # noqa: E402


def load_studies(path: Path) -> list[dict[str, Any]]:
    with path.open("r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("acceptance studies must be a JSON array")
    return data


def run_study(study: dict[str, Any], root: Path, jobs: int, replicates: int | None) -> Path:
    study_dir = root / study["id"]
    data_dir = study_dir / "data"
    scenario = ScenarioConfig.model_validate(study["scenario"])
    simulate_study(scenario, data_dir, replicates or study["replicates"], jobs)
    for label, model in study["approaches"].items():
        cfg = parse_run_config({**study.get("base", {}), "model": model}, source=f"{study['id']}:{label}")
        fit_study(cfg, data_dir, study_dir / "fits" / label, jobs, label)
    report_study(study_dir / "fits", study_dir / "report")
    return study_dir / "report"


def _stat(bias_cp: pd.DataFrame, stat: str, approach: str, parameter: str) -> float:
    row = bias_cp.loc[bias_cp["parameter"] == parameter]
    column = f"{stat}_{approach}"
    if row.empty or column not in row:
        raise KeyError(f"{stat} for {approach}/{parameter} not in report")
    return float(row[column].iloc[0])


def score_check(check: dict[str, Any], bias_cp: pd.DataFrame, looic: pd.DataFrame) -> dict[str, Any]:
    kind = check["type"]
    if kind == "max_abs_bias":
        observed = _stat(bias_cp, "bias", check["approach"], check["parameter"])
        passed = abs(observed) <= check["value"]
    elif kind == "max_bias":
        observed = _stat(bias_cp, "bias", check["approach"], check["parameter"])
        passed = observed <= check["value"]
    elif kind == "min_cp":
        observed = _stat(bias_cp, "cp", check["approach"], check["parameter"])
        passed = observed >= check["value"]
    elif kind == "median_looic_worse":
        medians = looic.groupby("approach")["looic"].median()
        observed = medians.to_dict()
        passed = all(medians[w] > medians[t] for w in check["worse"] for t in check["than"])
    else:
        raise ValueError(f"unknown check type {kind!r}")
    return {"check": check, "observed": observed, "passed": bool(passed)}


def score_study(study: dict[str, Any], report_dir: Path) -> list[dict[str, Any]]:
    bias_cp = pd.read_csv(report_dir / "bias_cp.csv", comment="#")
    looic = pd.read_csv(report_dir / "looic.csv", comment="#")
    return [score_check(check, bias_cp, looic) for check in study["checks"]]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--studies", type=Path, default=Path("evals/acceptance_studies.json"))
    parser.add_argument("--out", type=Path, default=Path("runs/acceptance"))
    parser.add_argument("--only", default="", help="Run a single study by id")
    parser.add_argument("--jobs", type=int, default=8)
    parser.add_argument("--replicates", type=int, default=None, help="Override replicate count (quick runs)")
    parser.add_argument("--score-only", action="store_true", help="Score existing report directories")
    parser.add_argument("--json", action="store_true", help="Print machine-readable JSON only")
    args = parser.parse_args()

    studies = [s for s in load_studies(args.studies) if not args.only or s["id"] == args.only]
    results = []
    started = time.time()

    for study in studies:
        try:
            report_dir = args.out / study["id"] / "report"
            if not args.score_only:
                report_dir = run_study(study, args.out, args.jobs, args.replicates)
            checks = score_study(study, report_dir)
            scored = {"id": study["id"], "passed": all(c["passed"] for c in checks), "checks": checks}
        except Exception as exc:
            scored = {"id": study["id"], "passed": False, "error": str(exc)}
        results.append(scored)

    passed = sum(1 for r in results if r.get("passed"))
    summary = {
        "passed": passed,
        "failed": len(results) - passed,
        "total": len(results),
        "elapsed_seconds": round(time.time() - started, 1),
        "results": results,
    }

    if args.json:
        print(json.dumps(summary, indent=2, default=str))
    else:
        print(f"Acceptance studies: {passed}/{len(results)} passed in {summary['elapsed_seconds']}s")
        for result in results:
            status = "PASS" if result.get("passed") else "FAIL"
            print(f"{status} {result['id']}")
            for check in result.get("checks", []):
                mark = "ok  " if check["passed"] else "fail"
                print(f"  {mark} {check['check']['type']} {check['check'].get('approach', '')}: {check['observed']}")
            if result.get("error"):
                print(f"  error: {result['error']}")

    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
