#!/usr/bin/env python3
"""Regenerate the data series of a shipped preset with several engines.

Example:
    python scripts/run_preset.py single_spin_open_kappa_10g --methods ngs twa oracle_lindblad

Each method writes ``<preset>_<method>.{csv,json,meta.json}`` to the output
directory. When an oracle method is among those requested, the maximum
absolute deviation of every other method from it is printed per observable.
"""

import argparse
import dataclasses
import logging
import sys
import time

import numpy as np

from ngstwa.cli_io import ConfigError, RunError, emit_series, load_config, run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("preset")
    ap.add_argument("--methods", nargs="+", default=None,
                    help="engines to run (default: the preset's own method)")
    ap.add_argument("--output-dir", default="results")
    ap.add_argument("--t-final", type=float, default=None, help="shorten the run (must be a multiple of output.dt)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    try:
        base = load_config(args.preset)
        if args.t_final is not None:
            base = dataclasses.replace(base, numerics=dataclasses.replace(base.numerics, t_final=args.t_final))
        methods = args.methods or [base.method]
        specs = {m: base.with_method(m) for m in methods}
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    bundles = {}
    for m, spec in specs.items():
        t0 = time.perf_counter()
        try:
            bundles[m] = run(spec)
        except RunError as exc:
            print(f"{m}: run failed: {exc}", file=sys.stderr)
            return 1
        paths = emit_series(bundles[m], args.output_dir, f"{base.name or args.preset}_{m}", spec.output.formats)
        print(f"{m}: {time.perf_counter() - t0:.1f}s -> {paths[0]}")

    oracle = next((m for m in bundles if m.startswith("oracle")), None)
    if oracle is not None:
        ref = bundles[oracle]
        for m, b in bundles.items():
            if m == oracle:
                continue
            for k, v in b.mean.items():
                if k in ref.mean:
                    print(f"{m} vs {oracle}: max |d {k}| = {np.nanmax(np.abs(v - ref.mean[k])):.4g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
