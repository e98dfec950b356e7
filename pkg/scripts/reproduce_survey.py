#!/usr/bin/env python3
"""Reproduce the runtime-survey verdicts on both platform versions and
print the tables side by side with wall times.

Usage: python scripts/reproduce_survey.py [--workers N] [--out DIR]
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from aexlab import explorer  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    mapping = explorer.load_mapping()
    for sgx in (2, 1):
        t0 = time.monotonic()
        cells = explorer.run_matrix(mapping, sgx, workers=args.workers)
        text = explorer.render_matrix(cells, sgx)
        print(text)
        print(f"[sgx{sgx}] {time.monotonic() - t0:.1f}s "
              f"with {args.workers} workers\n")
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, f"survey_sgx{sgx}.txt"),
                      "w") as fh:
                fh.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
