#!/usr/bin/env python3
"""Run the benchmark acceptance suite and print one line per criterion.

    python scripts/run_acceptance.py            # all twelve criteria
    python scripts/run_acceptance.py --fast     # skip the long benchmark runs (9-12)
    python scripts/run_acceptance.py -k 04      # a single criterion
"""

import argparse
import sys
from pathlib import Path

import pytest


def main(argv=None):
    ap = argparse.ArgumentParser(description="benchmark acceptance suite")
    ap.add_argument("--fast", action="store_true", help="deselect tests marked slow")
    ap.add_argument("-k", default=None, help="pytest -k expression")
    args = ap.parse_args(argv)
    tests = Path(__file__).resolve().parent.parent / "tests" / "test_acceptance.py"
    cmd = [str(tests), "-q", "-p", "no:cacheprovider"]
    if args.fast:
        cmd += ["-m", "not slow"]
    if args.k:
        cmd += ["-k", args.k]
    return pytest.main(cmd)


if __name__ == "__main__":
    sys.exit(main())
