"""Scenario orchestration: drive the adversary against the machine under
budgets, evaluate detectors, minimize counterexamples, and produce the
runtime-survey matrix."""

from __future__ import annotations

import json
import multiprocessing as mp
import os
import random
from dataclasses import dataclass, field
from typing import Optional

from . import adversary, reporting
from .harness import (
    Eenter, PrepareRegs,
    benign_critical_exception_plan, benign_nested_plan, benign_plan,
    prefix_plan, run_plan,
)
from .machine import VECTOR_IDS, Machine
from .properties import (
    Verdict, any_violation, evaluate, milestones,
)
from .runtimes import (
    EnclaveImage, Toggles, build_machine, build_runtime, fixture_path,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BUDGET = 2
EXIT_DIGEST_MISMATCH = 3
EXIT_VIOLATION = 10


class FixtureMissing(Exception):
    pass


@dataclass
class Outcome:
    scenario: dict
    status: str                      # ok | budget_exceeded
    verdicts: list[Verdict]
    milestones: tuple[str, ...]
    stats: dict
    trace_lines: Optional[list[str]]
    exit_code: int

    def report(self, trace_file: Optional[str]) -> dict:
        return reporting.render_report(
            self.scenario, self.status, self.verdicts, self.milestones,
            self.stats, trace_file, self.exit_code)


def _image_for(scenario: dict) -> EnclaveImage:
    tg = scenario["toggles"]
    offset = tg["aslr_stack_offset"]
    if scenario["adversary"] == "multi_round_aslr" and offset == 0 \
            and scenario["seed"]:
        offset = random.Random(scenario["seed"]).randint(1, 2048)
    toggles = Toggles(
        sgx1_valid_check_removed=tg["sgx1_valid_check_removed"],
        aslr_stack_offset=offset,
        alignment_required=tg["alignment_required"],
        critical_pad=tg["critical_pad"],
        flag_strategy=tg["flag_strategy"],
    )
    layout = None
    if scenario["layout"]:
        from .runtimes import Layout
        layout = Layout(**scenario["layout"])
    return build_runtime(scenario["variant"], layout=layout, toggles=toggles)


def _grant_for(scenario: dict, image: EnclaveImage):
    if image.variant == "hw_irq_quota":
        return (scenario["hw_ext"]["allowed"], scenario["hw_ext"]["window"])
    return None


def _classes_for(scenario: dict) -> tuple[int, ...]:
    return tuple(VECTOR_IDS[c] for c in scenario["inject_classes"])


def _recorded_run(scenario: dict, image: EnclaveImage, actions: list,
                  max_steps: int):
    """Run the full action list on a fresh machine, recording the trace
    lines with per-event digests."""
    m = build_machine(image, scenario["sgx_version"])
    grant = _grant_for(scenario, image)
    rec = reporting.TraceRecorder(m)
    if grant is not None:
        m.grant_irq_quota(*grant)
        rec.flush()
    res = run_plan(m, image, actions, max_steps=max_steps,
                   on_action=rec.on_action, after_events=rec.after_events)
    rec.flush()
    return res, rec.lines


def run(scenario: dict, workers: int = 1) -> Outcome:
    """Execute one scenario to a deterministic report."""
    image = _image_for(scenario)
    mode = scenario["adversary"]
    sgx = scenario["sgx_version"]
    props = tuple(scenario["properties"])
    sp_mode = scenario["sp_confinement_mode"]
    budgets = scenario["budgets"]
    classes = _classes_for(scenario)

    if mode == "monte_carlo":
        rate = adversary.estimate_single_shot_rate(scenario["trials"],
                                                   scenario["seed"])
        stats = {"trials": scenario["trials"], "rate": rate,
                 "exact_rate": adversary.exact_single_shot_rate()}
        return Outcome(scenario, "ok", [], (), stats, None, EXIT_OK)

    if mode == "multi_round_aslr":
        res = adversary.multi_round_aslr(image, sgx,
                                         max_rounds=scenario["max_rounds"])
        stats = {"rounds_needed": res.rounds_needed,
                 "success": res.success, "exhausted": res.exhausted,
                 "stack_shift": image.layout.stack_base - image.stack_base}
        verdicts = []
        lines = None
        ms: tuple = ()
        if res.trace is not None and res.plan is not None:
            verdicts = evaluate(res.trace, image, props, sp_mode=sp_mode,
                                cooperative=False)
            ms = milestones(res.trace, image)
            _, lines = _recorded_run(scenario, image,
                                     prefix_plan() + res.plan.actions,
                                     budgets["max_steps"])
        code = EXIT_VIOLATION if any_violation(verdicts) else EXIT_OK
        return Outcome(scenario, "ok", verdicts, ms, stats, lines, code)

    if mode.startswith("benign"):
        if mode == "benign":
            actions = benign_plan(image)
        elif mode == "benign_nested":
            actions = benign_nested_plan(image,
                                         scenario["boundary"] or 15)
        else:
            actions = benign_critical_exception_plan(
                image, scenario["boundary"] or 5)
        res, lines = _recorded_run(scenario, image, actions,
                                   budgets["max_steps"])
        verdicts = evaluate(res.trace, image, props, sp_mode=sp_mode,
                            cooperative=True)
        ms = milestones(res.trace, image)
        stats = {"steps": res.steps, "status": res.status}
        code = EXIT_VIOLATION if any_violation(verdicts) else EXIT_OK
        return Outcome(scenario, "ok", verdicts, ms, stats, lines, code)

    if mode == "scripted":
        try:
            plan = adversary.scripted_attack(
                image, sgx, vector=(VECTOR_IDS[scenario["vector"]]
                                    if scenario["vector"] else None),
                classes=classes, route=scenario["route"])
        except adversary.PlanInfeasible as e:
            stats = {"plan": "infeasible", "reason": e.reason}
            return Outcome(scenario, "ok", [], (), stats, None, EXIT_OK)
        actions = prefix_plan() + plan.actions
        res, lines = _recorded_run(scenario, image, actions,
                                   budgets["max_steps"])
        verdicts = evaluate(res.trace, image, props, sp_mode=sp_mode,
                            cooperative=False)
        ms = milestones(res.trace, image)
        stats = {"steps": res.steps, "status": res.status,
                 "expected_milestones": list(plan.expected_milestones)}
        code = EXIT_VIOLATION if any_violation(verdicts) else EXIT_OK
        return Outcome(scenario, "ok", verdicts, ms, stats, lines, code)

    # exhaustive
    budget = adversary.SearchBudget(
        max_runs=budgets["max_runs"],
        max_steps_per_run=budgets["max_steps"],
        boundary_cap=budgets["boundary_cap"],
        depth=budgets["depth"])
    out = adversary.exhaustive_attacker(
        image, sgx, classes=classes, budget=budget,
        grant=_grant_for(scenario, image), workers=workers, sp_mode=sp_mode)
    if isinstance(out, adversary.BudgetExceeded):
        return Outcome(scenario, "budget_exceeded", [], (),
                       out.stats.to_dict(), None, EXIT_BUDGET)
    if isinstance(out, adversary.NoneFound):
        verdicts = [Verdict(p, "no_violation_found", stats=out.stats.to_dict())
                    for p in props]
        return Outcome(scenario, "ok", verdicts, (), out.stats.to_dict(),
                       None, EXIT_OK)
    # counterexample: re-run its plan with digest recording for the trace
    actions = prefix_plan() + out.plan.actions
    res, lines = _recorded_run(scenario, image, actions, budgets["max_steps"])
    verdicts = evaluate(res.trace, image, props, sp_mode=sp_mode,
                        cooperative=False)
    ms = milestones(res.trace, image)
    stats = out.stats.to_dict()
    stats["branch"] = list(out.branch)
    return Outcome(scenario, "ok", verdicts, ms, stats, lines,
                   EXIT_VIOLATION)


# ---------------------------------------------------------------------------
# Counterexample minimization
# ---------------------------------------------------------------------------

def _fires(image: EnclaveImage, scenario: dict, actions: list,
           prop: str) -> bool:
    m = build_machine(image, scenario["sgx_version"])
    grant = _grant_for(scenario, image)
    if grant is not None:
        m.grant_irq_quota(*grant)
    res = run_plan(m, image, actions,
                   max_steps=scenario["budgets"]["max_steps"])
    verdicts = evaluate(res.trace, image, (prop,),
                        sp_mode=scenario["sp_confinement_mode"])
    return any_violation(verdicts) is not None


def minimize(scenario: dict, actions: list) -> list:
    """Greedy removal of host actions and zeroing of staged payload words
    while the same property still fires on replay.  Deterministic and
    idempotent; raises ValueError when the input does not violate."""
    image = _image_for(scenario)
    base = evaluate_with_scenario(scenario, image, actions)
    hit = any_violation(base)
    if hit is None:
        raise ValueError("not a violation")
    prop = hit.property_id

    current = list(actions)
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(current):
            candidate = current[:i] + current[i + 1:]
            if _fires(image, scenario, candidate, prop):
                current = candidate
                changed = True
            else:
                i += 1
        for i, action in enumerate(current):
            if not isinstance(action, PrepareRegs):
                continue
            regs = list(action.regs)
            for j, (name, val) in enumerate(regs):
                if val == 0:
                    continue
                trial = list(regs)
                trial[j] = (name, 0)
                candidate = list(current)
                candidate[i] = PrepareRegs(tuple(trial))
                if _fires(image, scenario, candidate, prop):
                    regs = trial
                    current = candidate
                    changed = True
    return current


def evaluate_with_scenario(scenario: dict, image: EnclaveImage,
                           actions: list) -> list[Verdict]:
    m = build_machine(image, scenario["sgx_version"])
    grant = _grant_for(scenario, image)
    if grant is not None:
        m.grant_irq_quota(*grant)
    res = run_plan(m, image, actions,
                   max_steps=scenario["budgets"]["max_steps"])
    return evaluate(res.trace, image, tuple(scenario["properties"]),
                    sp_mode=scenario["sp_confinement_mode"])


# ---------------------------------------------------------------------------
# Trace replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayResult:
    ok: bool
    divergence_line: int = -1
    detail: str = ""
    verdicts: list = field(default_factory=list)
    exit_code: int = EXIT_OK


def replay(scenario: dict, body_lines: list[str],
           declared_lines: int) -> ReplayResult:
    """Re-execute the recorded actions and re-check every event digest."""
    if len(body_lines) != declared_lines:
        return ReplayResult(False, len(body_lines),
                            "trace truncated or padded",
                            exit_code=EXIT_DIGEST_MISMATCH)
    actions = [reporting.action_from_line(ln) for ln in body_lines
               if ln.startswith("A ")]
    image = _image_for(scenario)
    res, lines = _recorded_run(scenario, image, actions,
                               scenario["budgets"]["max_steps"])
    for i, (want, got) in enumerate(zip(body_lines, lines)):
        if want != got:
            return ReplayResult(False, i, f"expected {want!r}, got {got!r}",
                                exit_code=EXIT_DIGEST_MISMATCH)
    if len(lines) != len(body_lines):
        return ReplayResult(False, min(len(lines), len(body_lines)),
                            "replay produced a different number of lines",
                            exit_code=EXIT_DIGEST_MISMATCH)
    cooperative = scenario["adversary"].startswith("benign")
    verdicts = evaluate(res.trace, image, tuple(scenario["properties"]),
                        sp_mode=scenario["sp_confinement_mode"],
                        cooperative=cooperative)
    code = EXIT_VIOLATION if any_violation(verdicts) else EXIT_OK
    return ReplayResult(True, verdicts=verdicts, exit_code=code)


# ---------------------------------------------------------------------------
# Critical-span emulation differential
# ---------------------------------------------------------------------------

@dataclass
class EmulationDifferential:
    range_pcs: int
    covered: int
    missing: list[int]
    mismatches: list[int]

    @property
    def clean(self) -> bool:
        return not self.missing and not self.mismatches


def emulation_differential(image: EnclaveImage, sgx_version: int = 2,
                           vector: int = 32) -> EmulationDifferential:
    """For every reachable interruption offset inside every registered
    critical span, compare span completion against its independent oracle:
    actually run the machine from that state to the span end natively, then
    take the same asynchronous exit, and require a bit-identical saved
    frame and memory."""
    from .interp import complete_critical, in_crit_ranges, step
    from .isa import OP_EEXIT_I, OP_EEXIT_R

    program = image.program
    ranges = image.crit_ranges
    wanted = {pc for lo, hi in ranges for pc in range(lo, hi)
              if pc in program.code}
    snapshots: dict[int, Machine] = {}

    def collect(m: Machine) -> None:
        pc = m.regs[16]
        if pc in wanted and pc not in snapshots:
            snapshots[pc] = m.clone()

    drivers = [
        benign_plan(image),
        [Eenter.of(7, regs={"rsp": 0, "rsi": 0})],            # invalid ecall
        [Eenter.of((-2) & ((1 << 64) - 1), regs={"rsp": 0, "rsi": 0})],
    ]
    for actions in drivers:
        m = build_machine(image, sgx_version)
        run_plan(m, image, actions, before_step=collect)

    mismatches = []
    for pc, snap in sorted(snapshots.items()):
        interrupted = snap.clone()
        if not interrupted.aex(vector):
            continue
        frame = interrupted.ssa[interrupted.tcs.cssa - 1]
        emu_machine = interrupted.clone()
        emulated = complete_critical(emu_machine, program, frame.clone())

        native = snap.clone()
        while True:
            npc = native.regs[16]
            ins = program.code.get(npc)
            if ins is None or not in_crit_ranges(program, npc):
                break
            if ins[0] in (OP_EEXIT_R, OP_EEXIT_I):
                break
            sig = step(native, program)
            if sig != "ok":
                raise RuntimeError(f"oracle run faulted at {npc:#x}: {sig}")
        native.aex(vector)
        oracle = native.ssa[native.tcs.cssa - 1]
        if (emulated.canonical() != oracle.canonical()
                or emu_machine.mem.canonical() != native.mem.canonical()):
            mismatches.append(pc)

    missing = sorted(wanted - set(snapshots))
    return EmulationDifferential(len(wanted), len(snapshots), missing,
                                 mismatches)


# ---------------------------------------------------------------------------
# Runtime-survey matrix
# ---------------------------------------------------------------------------

@dataclass
class MatrixCell:
    runtime: str
    variant: str
    exception_handling: bool
    verdict: str                    # VULN | SAFE | BUDGET
    stats: dict


def load_mapping(path: Optional[str] = None) -> list[dict]:
    path = path or fixture_path("runtime_matrix.json")
    if not os.path.exists(path):
        raise FixtureMissing(path)
    with open(path) as fh:
        doc = json.load(fh)
    return doc["runtimes"]


def _matrix_cell(args):
    variant, sgx_version, toggles = args
    scenario = reporting.normalize_scenario({
        "variant": variant, "sgx_version": sgx_version,
        "adversary": "exhaustive", "toggles": toggles})
    out = run(scenario, workers=1)
    if out.status == "budget_exceeded":
        return ("BUDGET", out.stats)
    verdict = "VULN" if any_violation(out.verdicts) else "SAFE"
    return (verdict, out.stats)


def run_matrix(mapping: list[dict], sgx_version: int,
               workers: int = 1) -> list[MatrixCell]:
    """Per-runtime vulnerable/safe verdicts via the exhaustive oracle.
    Rows mapping to the same modeled variant share one certification run."""
    keys = []
    for row in mapping:
        toggles = row.get("toggles") or {}
        key = (row["variant"], sgx_version,
               tuple(sorted(toggles.items())))
        if key not in keys:
            keys.append(key)
    args = [(v, s, dict(t)) for (v, s, t) in keys]
    if workers > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(min(workers, len(args))) as pool:
            results = pool.map(_matrix_cell, args)
    else:
        results = [_matrix_cell(a) for a in args]
    by_key = dict(zip(keys, results))

    cells = []
    for row in mapping:
        toggles = row.get("toggles") or {}
        key = (row["variant"], sgx_version, tuple(sorted(toggles.items())))
        verdict, stats = by_key[key]
        cells.append(MatrixCell(row["runtime"], row["variant"],
                                bool(row.get("exception_handling", True)),
                                verdict, stats))
    return cells


def render_matrix(cells: list[MatrixCell], sgx_version: int) -> str:
    name_w = max([len(c.runtime) for c in cells] + [len("runtime")])
    var_w = max([len(c.variant) for c in cells] + [len("modeled as")])
    lines = [f"runtime survey (sgx{sgx_version}, exhaustive certification)"]
    header = (f"{'runtime':<{name_w}}  {'modeled as':<{var_w}}  "
              f"exception-handling  verdict")
    lines.append(header)
    lines.append("-" * len(header))
    vuln = safe = budget = 0
    for c in cells:
        eh = "yes" if c.exception_handling else "no"
        lines.append(f"{c.runtime:<{name_w}}  {c.variant:<{var_w}}  "
                     f"{eh:<18}  {c.verdict}")
        if c.verdict == "VULN":
            vuln += 1
        elif c.verdict == "SAFE":
            safe += 1
        else:
            budget += 1
    total = len(cells)
    summary = f"totals: {vuln} vulnerable, {safe} safe"
    if budget:
        summary += f", {budget} budget-exceeded"
    lines.append(summary + f" (of {total})")
    return "\n".join(lines) + "\n"
