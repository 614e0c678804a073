#!/usr/bin/env python3
"""Run simulate -> fit -> loo twice under fixed seeds and diff every output digest."""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path
from typing import Any

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.datastore import directory_digests  # noqa: E402
from app.main import main as cli  # noqa: E402


def _run_once(config: str, root: Path) -> dict[str, str]:
    data, fit = root / "data", root / "fit"
    for argv in (
        ["simulate", "--config", config, "--out", str(data)],
        ["fit", "--config", config, "--data", str(data), "--out", str(fit)],
        ["loo", "--fit", str(fit)],
    ):
        code = cli(argv)
        if code not in (0, 4):
            raise RuntimeError(f"{argv[0]} exited with {code}")
    return directory_digests(root)


def _drift(first: dict[str, str], second: dict[str, str]) -> list[dict[str, Any]]:
    items = []
    for name in sorted(set(first) | set(second)):
        if first.get(name) != second.get(name):
            items.append({"file": name, "first": first.get(name), "second": second.get(name)})
    return items


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/smoke.toml")
    parser.add_argument("--json", action="store_true", help="Print the digest comparison as JSON")
    parser.add_argument("--no-strict", action="store_true", help="Exit 0 even when outputs differ")
    args = parser.parse_args()

    try:
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            first = _run_once(args.config, Path(a))
            second = _run_once(args.config, Path(b))
        drift = _drift(first, second)
        if args.json:
            print(json.dumps({"files": len(first), "drift": drift}, indent=2, sort_keys=True))
        else:
            print("Determinism audit")
            print(f"Files compared: {len(first)}")
            if not drift:
                print("Drift: none")
            for item in drift:
                print(f"- {item['file']}: {item['first']} != {item['second']}")
        return 1 if drift and not args.no_strict else 0
    except Exception as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
