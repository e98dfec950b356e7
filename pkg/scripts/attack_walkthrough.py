#!/usr/bin/env python3
"""Annotated walkthrough of the scripted anchor-hijack on the sdk-style
runtime: prints the plan bindings, the interesting trace events, the
milestones, and the detector verdicts.

Usage: python scripts/attack_walkthrough.py [--variant V] [--sgx {1,2}]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from aexlab import adversary, harness, properties  # noqa: E402
from aexlab.isa import render  # noqa: E402
from aexlab.machine import (  # noqa: E402
    E_CTRL, E_HW_AEX, E_HW_EENTER, E_HW_ERESUME, E_LEAK, E_SP_ASSIGN,
    EVENT_NAMES,
)
from aexlab.runtimes import build_machine, build_runtime  # noqa: E402

INTERESTING = {E_HW_EENTER, E_HW_AEX, E_HW_ERESUME, E_SP_ASSIGN, E_CTRL,
               E_LEAK}


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--variant", default="sdk_style")
    ap.add_argument("--sgx", type=int, choices=(1, 2), default=2)
    args = ap.parse_args()

    img = build_runtime(args.variant)
    try:
        plan = adversary.scripted_attack(img, args.sgx)
    except adversary.PlanInfeasible as e:
        print(f"{args.variant} on sgx{args.sgx}: plan infeasible - {e.reason}")
        return 0

    print(f"plan: {plan.name}")
    for key, val in sorted(plan.bindings.items()):
        if isinstance(val, tuple):
            val = "[" + ", ".join(hex(w) for w in val) + "]"
        elif isinstance(val, int):
            val = hex(val)
        print(f"  {key:12s} {val}")

    m = build_machine(img, args.sgx)
    harness.run_plan(m, img, harness.prefix_plan())
    res = harness.run_plan(m, img, plan.actions)

    print("\nkey events:")
    for ev in res.trace:
        if ev[0] not in INTERESTING:
            continue
        name = EVENT_NAMES[ev[0]]
        where = img.program.label_of(ev[1]) or hex(ev[1])
        ins = img.program.code.get(ev[1])
        desc = render(ins) if ins else ""
        print(f"  {name:8s} at {where:20s} {desc}")

    print("\nmilestones:", " -> ".join(properties.milestones(res.trace, img)))
    for v in properties.evaluate(res.trace, img,
                                 properties.SAFETY_PROPERTIES):
        mark = "!" if v.violated else " "
        print(f" {mark} {v.property_id}: {v.outcome} {v.detail}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
