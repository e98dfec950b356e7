"""The malicious host: scripted anchor-hijack plans, the exhaustive
injection-point attacker used as the certification oracle, and the
randomized-stack bypass experiments.

The scripted attacker knows the image layout (no randomization by
default): it crafts entry registers so that the exception flow's context
copy lands on the ocall return-address anchor, points the restored stack
at a gadget chain, and drives the block-copy helper to exfiltrate the
secret region.  The exhaustive attacker rediscovers violations from a
plan template with holes, enumerating injection boundaries, exception
classes, re-entry commands, and register bindings from a finite domain.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass
from typing import Optional

from .harness import (
    AttackPlan, BENIGN_OCALL_RESULT, BENIGN_REGS, DEFAULT_MAX_STEPS, Eenter,
    Eresume, InjectAex, PrepareRegs, SeedPublic, Stop, prefix_plan,
    run_plan,
)
from .machine import (
    MASK64, RSP, SCRUB_VALUES, SGX2, VEC_EXT_INT, VEC_PAGE_FAULT,
    Machine, reports_to_enclave,
)
from .properties import SAFETY_PROPERTIES, Verdict, any_violation, evaluate
from .runtimes import (
    ASLR_RANGE, CMD_EXCEPTION, CMD_INVALID, CMD_ORET, ECALL0_FRAME,
    EnclaveImage, INFO_FIELDS, INFO_FREE_WINDOW, INFO_SIZE, Toggles,
    build_machine, build_runtime,
)

MEMCPY_CHAIN_LEN = 8      # pop/ret feeding words plus copy and terminator


class PlanInfeasible(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


# ---------------------------------------------------------------------------
# Register crafting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Craft:
    """Solution of the variant's stack-pointer arithmetic: entering with
    rsp = crafted makes the handler's context copy start at info_base, so
    the word at `anchor` receives the register at field index lander."""

    crafted_rsp: int
    info_base: int
    lander_index: int


def craft_sp(image: EnclaveImage) -> Craft:
    """Pick the crafted stack pointer for this variant so that the copy
    span starts at the anchor (or one word below, preserving the 16-byte
    struct alignment) and never touches the checked context fields."""
    anchor = image.anchor_addr
    base16 = anchor & ~0xF
    lander = (anchor - base16) // 8          # 0 or 1
    if image.variant == "enarx_style":
        # red-zone skip then align-down then struct allocation
        want = base16 + INFO_SIZE            # (crafted-128) & ~15 must equal
        crafted = want + 128
        if want % 16:
            crafted += 8
        info_base = ((crafted - 128) & ~0xF) - INFO_SIZE
    else:
        # struct allocation then align-down; crafted stays 16-aligned so the
        # handler's own alignment check passes
        crafted = base16 + INFO_SIZE + 8
        if crafted % 16:
            crafted += 8
        info_base = (crafted - INFO_SIZE) & ~0xF
    lander = (anchor - info_base) // 8
    assert 0 <= lander <= 1, "crafting drifted off the anchor"
    return Craft(crafted, info_base, lander)


def _memcpy_chain(image: EnclaveImage, leak_dst: int) -> list[int]:
    g = image.gadgets
    lay = image.layout
    return [g["pop_rdx"], lay.secret_len, g["pop_rsi"], lay.secret_base,
            g["pop_rdi"], leak_dst, g["memcpy"], g["halt"]]


def _feasibility(image: EnclaveImage, sgx_version: int,
                 classes: tuple[int, ...]) -> int:
    """Return the exception class the scripted attack should use, or raise
    PlanInfeasible with the blocking reason."""
    v = image.variant
    if v == "graphene_emulated":
        raise PlanInfeasible("critical-window injections are emulated away")
    if v == "nssa_disabled":
        raise PlanInfeasible("no free context slot for handler re-entry")
    if v == "hw_reentry_mask":
        raise PlanInfeasible("re-entry masked through the critical section")
    if v == "hw_irq_quota":
        raise PlanInfeasible("injections deferred past the critical section")
    if v == "dedicated_stack":
        raise PlanInfeasible("handler ignores the saved stack pointer")
    checks_validity = v in ("sdk_style",) and not image.toggles.sgx1_valid_check_removed
    if checks_validity:
        usable = [c for c in classes if reports_to_enclave(c, sgx_version)]
        if not usable:
            raise PlanInfeasible(
                "no injectable class reports to the enclave as valid")
        return usable[0]
    # copy-before-check orderings work with any injectable class
    return classes[0] if classes else VEC_EXT_INT


def scripted_attack(image: EnclaveImage, sgx_version: int = SGX2,
                    vector: Optional[int] = None,
                    classes: tuple[int, ...] = (VEC_PAGE_FAULT, VEC_EXT_INT),
                    route: Optional[str] = None) -> AttackPlan:
    """The end-to-end anchor-hijack plan: corrupt the anchor through the
    exception flow's context copy, pivot the restored stack onto a gadget
    chain, and copy the secret region out.  `route` picks where the chain
    lives: "private" reuses the copied-register region on the enclave
    stack, "public" а host-prepared buffer."""
    if vector is None:
        vector = _feasibility(image, sgx_version, classes)
    if route is None:
        route = "public" if image.variant in ("open_enclave_style",
                                              "enarx_style") else "private"
    craft = craft_sp(image)
    lay = image.layout
    anchor = image.anchor_addr
    chain = _memcpy_chain(image, lay.pubbuf_base + 0x200)

    regs: dict[str, int] = {"rsp": craft.crafted_rsp, "rsi": 0}
    actions: list = []
    if route == "private":
        # the chain rides in the copied registers right above the anchor
        lander_reg = INFO_FIELDS[craft.lander_index]
        chain_addr = anchor + 8
        regs[lander_reg] = image.gadgets["pivot"]
        for fld, word in zip(INFO_FIELDS[craft.lander_index + 1:], chain):
            regs[fld] = word
        regs["rcx"] = chain_addr
    else:
        # the chain sits in host-prepared public memory
        lander_reg = INFO_FIELDS[craft.lander_index]
        regs[lander_reg] = image.gadgets["pivot"]
        regs["rcx"] = lay.pubbuf_base
        actions.append(SeedPublic(lay.pubbuf_base, tuple(chain)))

    actions += [
        PrepareRegs.of(**regs),
        InjectAex(vector, 0),
        Eenter.of(CMD_ORET),
        Eenter.of(CMD_EXCEPTION, regs=dict(BENIGN_REGS)),
        Eresume(),
        Stop(),
    ]
    return AttackPlan(
        name=f"scripted/{image.variant}/sgx{sgx_version}",
        actions=actions,
        bindings={
            "anchor": anchor,
            "crafted_rsp": craft.crafted_rsp,
            "pivot_target": regs["rcx"],
            "chain": tuple(chain),
            "vector": vector,
            "route": route,
        },
        expected_milestones=("anchor_written", "pivoted", "leaked"),
    )


# ---------------------------------------------------------------------------
# Value domain and the exhaustive attacker
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValueDomain:
    """Finite candidate words for attacker-controlled registers;
    enumeration order is the declaration order."""

    words: tuple[int, ...]


def default_domain(image: EnclaveImage) -> ValueDomain:
    craft = craft_sp(image)
    lay = image.layout
    anchor = image.anchor_addr
    words = (
        craft.crafted_rsp,
        (craft.crafted_rsp + 8) & MASK64,
        (craft.crafted_rsp - 8) & MASK64,
        anchor,
        (anchor + 8) & MASK64,
        image.stack_base,
        lay.stack_limit,
        lay.pubbuf_base,
        image.gadgets["pivot"],
        image.gadgets["pop_rdi"],
        SCRUB_VALUES[RSP],
        0,
    )
    return ValueDomain(words)


PAYLOAD_REGS = ("r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
                "rax", "rbx", "rcx")
REENTRY_CMDS = (CMD_ORET, CMD_INVALID, CMD_EXCEPTION)


@dataclass
class SearchStats:
    runs: int = 0
    steps: int = 0
    boundaries: int = 0

    def merge(self, other: "SearchStats") -> None:
        self.runs += other.runs
        self.steps += other.steps
        self.boundaries += other.boundaries

    def to_dict(self) -> dict:
        return {"runs": self.runs, "steps": self.steps,
                "boundaries": self.boundaries}


@dataclass
class Counterexample:
    branch: tuple
    plan: AttackPlan
    trace: list
    verdicts: list
    stats: SearchStats


@dataclass
class NoneFound:
    stats: SearchStats


@dataclass
class BudgetExceeded:
    stats: SearchStats
    reason: str = ""


@dataclass(frozen=True)
class SearchBudget:
    max_runs: int = 200000
    max_steps_per_run: int = DEFAULT_MAX_STEPS
    boundary_cap: int = 160
    depth: int = 6          # actions per candidate plan


def _candidate_actions(cmd: int, rsp_bind: int, payload_bind: int,
                       inject: Optional[tuple[int, int]]) -> list:
    regs = {"rsp": rsp_bind, "rsi": 0}
    for r in PAYLOAD_REGS:
        regs[r] = payload_bind
    actions: list = [PrepareRegs.of(**regs)]
    if inject is not None:
        vec, k = inject
        actions.append(InjectAex(vec, k))
    actions.append(Eenter.of(cmd))
    if inject is not None:
        actions += [
            Eenter.of(CMD_EXCEPTION, regs=dict(BENIGN_REGS)),
            Eresume(),
            Eenter.of(CMD_ORET, regs={"rsp": 0, "rsi": BENIGN_OCALL_RESULT}),
        ]
    return actions


def _prefix_snapshot(image: EnclaveImage, sgx_version: int,
                     grant: Optional[tuple[int, int]]) -> Machine:
    m = build_machine(image, sgx_version)
    if grant is not None:
        m.grant_irq_quota(*grant)
    res = run_plan(m, image, prefix_plan())
    if res.status != "done":
        raise RuntimeError(f"scenario prefix failed: {res.status}")
    return m


def _search_branch(image: EnclaveImage, snapshot: Machine, cmd_i: int,
                   rsp_i: int, domain: ValueDomain,
                   classes: tuple[int, ...], budget: SearchBudget,
                   sp_mode: str,
                   stats: SearchStats) -> Optional[Counterexample]:
    cmd = REENTRY_CMDS[cmd_i]
    rsp_bind = domain.words[rsp_i]
    for pay_i, payload in enumerate(domain.words):
        dry = run_plan(snapshot.clone(), image,
                       _candidate_actions(cmd, rsp_bind, payload, None),
                       max_steps=budget.max_steps_per_run)
        stats.runs += 1
        stats.steps += dry.steps
        verdict = _check(dry.trace, image, sp_mode)
        if verdict is not None:
            return Counterexample((cmd_i, rsp_i, pay_i, -1, -1),
                                  AttackPlan("exhaustive", _candidate_actions(
                                      cmd, rsp_bind, payload, None)),
                                  dry.trace, verdict, stats)
        n_boundaries = min(dry.boundaries, budget.boundary_cap)
        for k in range(n_boundaries + 1):
            for vec in classes:
                if vec == VEC_PAGE_FAULT and k != 0:
                    continue  # permission faults realize at the entry fetch
                actions = _candidate_actions(cmd, rsp_bind, payload, (vec, k))
                res = run_plan(snapshot.clone(), image, actions,
                               max_steps=budget.max_steps_per_run)
                stats.runs += 1
                stats.steps += res.steps
                stats.boundaries += 1
                verdict = _check(res.trace, image, sp_mode)
                if verdict is not None:
                    return Counterexample(
                        (cmd_i, rsp_i, pay_i, k, vec),
                        AttackPlan("exhaustive", actions),
                        res.trace, verdict, stats)
    return None


def _check(trace, image, sp_mode) -> Optional[list[Verdict]]:
    verdicts = evaluate(trace, image, SAFETY_PROPERTIES, sp_mode=sp_mode)
    return verdicts if any_violation(verdicts) else None


# worker-process state for parallel search
_W: dict = {}


def _worker_init(variant, toggles_kv, sgx_version, grant, classes, budget,
                 sp_mode):
    image = build_runtime(variant, toggles=Toggles(**dict(toggles_kv)))
    _W["image"] = image
    _W["snapshot"] = _prefix_snapshot(image, sgx_version, grant)
    _W["domain"] = default_domain(image)
    _W["classes"] = classes
    _W["budget"] = budget
    _W["sp_mode"] = sp_mode


def _worker_branch(args):
    cmd_i, rsp_i = args
    stats = SearchStats()
    ce = _search_branch(_W["image"], _W["snapshot"], cmd_i, rsp_i,
                        _W["domain"], _W["classes"], _W["budget"],
                        _W["sp_mode"], stats)
    if ce is None:
        return (None, stats)
    return ((ce.branch, ce.plan.actions, ce.trace), stats)


def exhaustive_attacker(image: EnclaveImage, sgx_version: int = SGX2,
                        classes: tuple[int, ...] = (VEC_PAGE_FAULT,
                                                    VEC_EXT_INT),
                        domain: Optional[ValueDomain] = None,
                        budget: Optional[SearchBudget] = None,
                        grant: Optional[tuple[int, int]] = None,
                        workers: int = 1, sp_mode: str = "range"):
    """Depth-first enumeration over injection boundaries, exception
    classes, re-entry commands and register bindings.  Returns the first
    (lowest-lexicographic-branch) Counterexample, or NoneFound with visited
    statistics only when the full bounded space was enumerated."""
    domain = domain or default_domain(image)
    budget = budget or SearchBudget()
    if grant is None and image.variant == "hw_irq_quota":
        grant = (100, 10000)
    branches = [(c, r) for c in range(len(REENTRY_CMDS))
                for r in range(len(domain.words))]

    # The run budget is enforced between branches (each branch is small and
    # always completes), so stats and outcomes are identical regardless of
    # worker count: workers only compute branches, consumption is ordered.
    total = SearchStats()
    if workers <= 1:
        snapshot = _prefix_snapshot(image, sgx_version, grant)
        for cmd_i, rsp_i in branches:
            stats = SearchStats()
            ce = _search_branch(image, snapshot, cmd_i, rsp_i, domain,
                                classes, budget, sp_mode, stats)
            total.merge(stats)
            if ce is not None:
                ce.stats = total
                return ce
            if total.runs >= budget.max_runs:
                return BudgetExceeded(total, "run budget exhausted")
        return NoneFound(total)

    ctx = mp.get_context("fork")
    toggles_kv = tuple(sorted(vars(image.toggles).items()))
    with ctx.Pool(workers, initializer=_worker_init,
                  initargs=(image.variant, toggles_kv, sgx_version, grant,
                            classes, budget, sp_mode)) as pool:
        # ordered consumption keeps the result independent of worker count
        for (hit, stats), branch in zip(
                pool.imap(_worker_branch, branches), branches):
            total.merge(stats)
            if hit is not None:
                branch_key, actions, trace = hit
                verdicts = evaluate(trace, image, SAFETY_PROPERTIES,
                                    sp_mode=sp_mode)
                pool.terminate()
                return Counterexample(branch_key,
                                      AttackPlan("exhaustive", actions),
                                      trace, verdicts, total)
            if total.runs >= budget.max_runs:
                pool.terminate()
                return BudgetExceeded(total, "run budget exhausted")
    return NoneFound(total)


# ---------------------------------------------------------------------------
# Randomized-stack (ASLR) experiments
# ---------------------------------------------------------------------------

def exact_single_shot_rate(window: int = INFO_FREE_WINDOW,
                           span: int = ASLR_RANGE) -> float:
    """Enumerate every offset: the controlled window covers exactly
    `window` of the `span` possible placements."""
    hits = sum(1 for off in range(1, span + 1) if off <= window)
    return hits / span


def estimate_single_shot_rate(trials: int, seed: int,
                              window: int = INFO_FREE_WINDOW,
                              span: int = ASLR_RANGE) -> float:
    """Monte Carlo over fresh offsets, deterministic for a given seed."""
    import random
    if trials < 1:
        raise ValueError("trials must be positive")
    rng = random.Random(seed)
    hits = 0
    for _ in range(trials):
        if rng.randint(1, span) <= window:
            hits += 1
    return hits / trials


@dataclass
class MultiRoundResult:
    success: bool
    rounds_needed: int
    exhausted: bool
    plan: Optional[AttackPlan]
    anchor_corrupted: bool = False
    trace: Optional[list] = None


def multi_round_aslr(image: EnclaveImage, sgx_version: int = SGX2,
                     max_rounds: int = 32,
                     simulate: bool = True) -> MultiRoundResult:
    """Iterate the corruption steps with invalid ecall commands so the
    enclave exits before using the planted values, sweeping one 64-byte
    window per round across the randomization range; the final round
    enters with the real ocall-return command.

    The attacker only knows the nominal layout; the image carries the true
    randomized base.  Success means the union of corrupted windows covered
    the true anchor."""
    lay = image.layout
    nominal_anchor = lay.stack_base - ECALL0_FRAME - 8
    shift = lay.stack_base - image.stack_base       # ground truth, quantized
    needed = shift // INFO_FREE_WINDOW + 1
    if needed > max_rounds:
        return MultiRoundResult(False, needed, True, None)

    # The attacker cannot observe which round hit, so every round in the
    # budget runs; the sweep moves downward so rounds before the hit write
    # only caller-stack junk above the true anchor.
    marker = image.gadgets["pivot"]
    rounds = []
    for r in range(1, max_rounds + 1):
        band_base = nominal_anchor - INFO_FREE_WINDOW * (r - 1) - 56
        crafted = band_base + INFO_SIZE + 8
        regs = {"rsp": crafted, "rsi": 0}
        for reg in INFO_FIELDS[:8]:          # the freely-valued window
            regs[reg] = marker
        rounds += [
            PrepareRegs.of(**regs),
            InjectAex(VEC_PAGE_FAULT, 0),
            Eenter.of(CMD_INVALID),
            Eenter.of(CMD_EXCEPTION, regs=dict(BENIGN_REGS)),
            Eresume(),
        ]
    rounds += [Eenter.of(CMD_ORET,
                         regs={"rsp": 0, "rsi": BENIGN_OCALL_RESULT})]
    plan = AttackPlan(name=f"multi_round/{image.variant}", actions=rounds,
                      bindings={"shift": shift, "rounds": needed,
                                "marker": marker})

    if not simulate:
        return MultiRoundResult(True, needed, False, plan)

    machine = _prefix_snapshot(image, sgx_version, None)
    anchor = image.anchor_addr
    recorded = machine.mem.read(anchor)[0]
    res = run_plan(machine, image, plan.actions)
    corrupted = machine.mem.read(anchor)[0] != recorded
    return MultiRoundResult(corrupted, needed, False, plan,
                            anchor_corrupted=corrupted, trace=res.trace)
