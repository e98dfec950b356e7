"""Drives an adversary (or cooperative host) plan against a machine.

A plan is a static, replayable list of host-side actions.  The harness
alternates between applying actions in OS mode and stepping the enclave,
firing armed asynchronous exits at the requested instruction boundary.
Because the machine is deterministic, reactive host behavior (answer an
ocall, deliver an exception, resume) can be written down as a fixed action
sequence; an action that the hardware refuses (denied entry or resume)
terminates the run with the refusal on the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .interp import step
from .machine import (
    E_ADV_SEED, EntryDenied, MASK64, MODE_ENCLAVE, REG_IDS,
    ResumeDenied, Machine, UnknownPage,
)
from .runtimes import EnclaveImage

# Run end statuses.
DONE = "done"               # plan exhausted with the platform quiescent
STOPPED = "stopped"         # explicit stop action
HALTED = "halted"           # enclave executed a halt (or aborted)
ENTRY_DENIED = "entry_denied"
RESUME_DENIED = "resume_denied"
STALLED = "stalled"         # fault undeliverable inside an atomic window
BUDGET_EXCEEDED = "budget_exceeded"

DEFAULT_MAX_STEPS = 20000


@dataclass(frozen=True)
class PrepareRegs:
    """Stage register values for the next synchronous entry."""
    regs: tuple[tuple[str, int], ...]

    @staticmethod
    def of(**kv: int) -> "PrepareRegs":
        return PrepareRegs(tuple(sorted((k, v & MASK64) for k, v in kv.items())))


@dataclass(frozen=True)
class Eenter:
    cmd: int
    regs: Optional[tuple[tuple[str, int], ...]] = None  # None: use staged
    aep: Optional[int] = None

    @staticmethod
    def of(cmd: int, regs: Optional[dict[str, int]] = None,
           aep: Optional[int] = None) -> "Eenter":
        packed = None if regs is None else tuple(
            sorted((k, v & MASK64) for k, v in regs.items()))
        return Eenter(cmd & MASK64, packed, aep)


@dataclass(frozen=True)
class Eresume:
    pass


@dataclass(frozen=True)
class InjectAex:
    """Arm an asynchronous exit of class `vector` for the next entered
    window, to fire after `boundary` retired instructions."""
    vector: int
    boundary: int


@dataclass(frozen=True)
class FlipPerms:
    page_base: int
    perms: int


@dataclass(frozen=True)
class SeedPublic:
    """Host-side preparation of public memory (e.g. a gadget stack)."""
    addr: int
    words: tuple[int, ...]


@dataclass(frozen=True)
class Stop:
    pass


Action = object


@dataclass
class AttackPlan:
    """Ordered host actions plus the value bindings that shaped them."""

    name: str
    actions: list
    bindings: dict = field(default_factory=dict)
    expected_milestones: tuple[str, ...] = ()


@dataclass
class RunResult:
    status: str
    steps: int
    boundaries: int          # instruction boundaries seen in entered windows
    machine: Machine
    actions_applied: int

    @property
    def trace(self) -> list[tuple]:
        return self.machine.trace


def run_plan(machine: Machine, image: EnclaveImage, actions: list,
             max_steps: int = DEFAULT_MAX_STEPS,
             on_action: Optional[Callable[[int, object], None]] = None,
             after_events: Optional[Callable[[], None]] = None,
             before_step: Optional[Callable[[Machine], None]] = None
             ) -> RunResult:
    """Execute `actions` to completion.  `on_action` is called before each
    action is applied (for trace serialization); `after_events` after every
    atomic machine transition (for digest recording); `before_step` with
    the machine right before each instruction (for state collection)."""
    program = image.program
    staged: dict[str, int] = {}
    armed: Optional[InjectAex] = None     # pending for the next window
    live: Optional[InjectAex] = None      # counting in the current window
    window_count = 0
    steps = 0
    boundaries = 0
    idx = 0
    status = DONE

    def notify():
        if after_events is not None:
            after_events()

    while True:
        if machine.halted:
            status = HALTED
            break
        if steps >= max_steps:
            status = BUDGET_EXCEEDED
            break

        if machine.mode == MODE_ENCLAVE:
            # fire an armed injection at its boundary
            if live is not None and window_count == live.boundary:
                vec = live.vector
                live = None
                delivered = machine.aex(vec)
                notify()
                if not delivered:
                    continue  # deferred into the atomic window
                continue
            # expire a cycle-bounded atomic window
            if (machine.hw.atomic and machine.hw.kind == "irq_quota"
                    and machine.cycle >= machine.hw.atomic_until):
                vec = machine.end_atomic()
                if vec is not None:
                    if not machine.aex(vec):
                        raise AssertionError("deferred delivery re-deferred")
                    notify()
                    continue
            if before_step is not None:
                before_step(machine)
            sig = step(machine, program)
            steps += 1
            notify()
            if sig == "ok":
                window_count += 1
                boundaries += 1
                continue
            if sig == "fault":
                delivered = machine.aex(machine.pending_fault)
                notify()
                if not delivered:
                    status = STALLED
                    break
                live = None
                continue
            if sig == "exit":
                live = None
                continue
            if sig == "halt":
                status = HALTED
                break
            raise AssertionError(sig)

        # OS mode: apply the next action
        if idx >= len(actions):
            status = DONE
            break
        action = actions[idx]
        if on_action is not None:
            on_action(idx, action)
        idx += 1

        if isinstance(action, PrepareRegs):
            staged = dict(action.regs)
        elif isinstance(action, Eenter):
            regs = dict(action.regs) if action.regs is not None else dict(staged)
            regs["rdi"] = action.cmd
            os_regs = [0] * len(REG_IDS)
            for name, val in regs.items():
                os_regs[REG_IDS[name]] = val & MASK64
            aep = action.aep if action.aep is not None else image.layout.aep
            try:
                machine.eenter(os_regs, aep)
                notify()
            except EntryDenied:
                notify()
                status = ENTRY_DENIED
                break
            live = armed
            armed = None
            window_count = 0
        elif isinstance(action, Eresume):
            try:
                machine.eresume()
                notify()
            except ResumeDenied:
                notify()
                status = RESUME_DENIED
                break
            if armed is not None:
                live = armed
                armed = None
                window_count = 0
        elif isinstance(action, InjectAex):
            armed = action
        elif isinstance(action, FlipPerms):
            try:
                machine.os_set_page_perms(action.page_base, action.perms)
                notify()
            except UnknownPage:
                raise
        elif isinstance(action, SeedPublic):
            for i, w in enumerate(action.words):
                machine.mem.write(action.addr + 8 * i, w & MASK64, False)
            machine.emit(E_ADV_SEED, 0, action.addr, len(action.words))
            notify()
        elif isinstance(action, Stop):
            status = STOPPED
            break
        else:
            raise TypeError(f"unknown action {action!r}")

    return RunResult(status=status, steps=steps, boundaries=boundaries,
                     machine=machine, actions_applied=idx)


# ---------------------------------------------------------------------------
# Canonical host scripts
# ---------------------------------------------------------------------------

BENIGN_OCALL_RESULT = 42
BENIGN_REGS = {"rsp": 0, "rsi": 0}


def prefix_plan() -> list:
    """Drive the compute ecall up to its pending ocall: the state every
    ocall-return scenario starts from."""
    return [Eenter.of(0, regs=dict(BENIGN_REGS))]


def benign_plan(image: EnclaveImage) -> list:
    """Cooperative host: run the faulting ecall (deliver its exception,
    resume), then the compute ecall with a served ocall."""
    return [
        Eenter.of(1, regs=dict(BENIGN_REGS)),
        Eenter.of((-3) & MASK64, regs=dict(BENIGN_REGS)),
        Eresume(),
        Eenter.of(0, regs=dict(BENIGN_REGS)),
        Eenter.of((-2) & MASK64, regs={"rsp": 0, "rsi": BENIGN_OCALL_RESULT}),
        Stop(),
    ]


def benign_nested_plan(image: EnclaveImage, handler_boundary: int = 15) -> list:
    """Cooperative host that lets a second exception land while the first
    is being handled, then attempts to deliver it."""
    exc = (-3) & MASK64
    return [
        Eenter.of(1, regs=dict(BENIGN_REGS)),
        InjectAex(32, handler_boundary),
        Eenter.of(exc, regs=dict(BENIGN_REGS)),
        Eenter.of(exc, regs=dict(BENIGN_REGS)),
        Eresume(),
        Eresume(),
        Stop(),
    ]


def benign_critical_exception_plan(image: EnclaveImage, boundary: int,
                                   vector: int = 32) -> list:
    """Cooperative host that delivers an exception landing inside the
    ocall-return window, then serves the ocall to completion."""
    exc = (-3) & MASK64
    oret = (-2) & MASK64
    return [
        Eenter.of(0, regs=dict(BENIGN_REGS)),
        InjectAex(vector, boundary),
        Eenter.of(oret, regs={"rsp": 0, "rsi": BENIGN_OCALL_RESULT}),
        Eenter.of(exc, regs=dict(BENIGN_REGS)),
        Eresume(),
        Stop(),
    ]
