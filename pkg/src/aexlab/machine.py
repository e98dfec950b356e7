"""Abstract hardware model: register file, memory map, SSA frames, TCS, and
the entry/exit/async-exit instructions of the simulated platform.

The machine is a deterministic transition system.  All mutation happens
through the operations defined here or through the instruction interpreter;
a canonical serialization (see ``digest``) makes state comparable across
runs and worker processes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

# ---------------------------------------------------------------------------
# Registers
# ---------------------------------------------------------------------------

RAX, RBX, RCX, RDX, RDI, RSI, RBP, RSP = range(8)
R8, R9, R10, R11, R12, R13, R14, R15 = range(8, 16)
RIP = 16
RFLAGS = 17
NREGS = 18

REG_NAMES = [
    "rax", "rbx", "rcx", "rdx", "rdi", "rsi", "rbp", "rsp",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
    "rip", "rflags",
]
REG_IDS = {name: i for i, name in enumerate(REG_NAMES)}

MASK64 = (1 << 64) - 1

# Post-AEX register contents: a fixed sentinel per register so traces stay
# reproducible.  The real scrub values are unspecified; these are ours.
SCRUB_VALUES = tuple(0x5C00 + i for i in range(NREGS))

RFLAGS_DF = 0x400
RFLAGS_AC = 0x40000

# ---------------------------------------------------------------------------
# Exception classes (x86 vector numbers where they exist)
# ---------------------------------------------------------------------------

VEC_DIV = 0
VEC_DEBUG = 1
VEC_BREAKPOINT = 3
VEC_BOUND = 5
VEC_UD = 6
VEC_MF = 16
VEC_AC = 17
VEC_XM = 19
VEC_PAGE_FAULT = 14
VEC_EXT_INT = 32

# The eight exception classes every platform version reports to the enclave.
# They are synchronous: only a faulting enclave instruction can raise them.
SYNC_VECTORS = frozenset({VEC_DIV, VEC_DEBUG, VEC_BREAKPOINT, VEC_BOUND,
                          VEC_UD, VEC_MF, VEC_AC, VEC_XM})
INJECTABLE_VECTORS = frozenset({VEC_PAGE_FAULT, VEC_EXT_INT})

VECTOR_NAMES = {
    VEC_DIV: "div_zero",
    VEC_DEBUG: "debug",
    VEC_BREAKPOINT: "breakpoint",
    VEC_BOUND: "bound",
    VEC_UD: "invalid_opcode",
    VEC_MF: "fp_error",
    VEC_AC: "align_check",
    VEC_XM: "simd_error",
    VEC_PAGE_FAULT: "page_fault",
    VEC_EXT_INT: "external_interrupt",
}
VECTOR_IDS = {v: k for k, v in VECTOR_NAMES.items()}

SGX1 = 1
SGX2 = 2


def reports_to_enclave(vector: int, sgx_version: int) -> bool:
    """Whether an async exit of class `vector` sets the valid bit in the
    saved frame.  Page faults are reported only on version 2; external
    interrupts never are; the synchronous family always is."""
    if vector in SYNC_VECTORS:
        return True
    if vector == VEC_PAGE_FAULT:
        return sgx_version == SGX2
    return False


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class MachineError(Exception):
    """Illegal use of a hardware operation (a harness bug, never an event)."""


class EntryDenied(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ResumeDenied(Exception):
    pass


class UnknownPage(Exception):
    pass


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------

PRIVATE = 0
PUBLIC = 1

PERM_R = 1
PERM_W = 2
PERM_X = 4


@dataclass
class Page:
    base: int
    size: int
    kind: int            # PRIVATE or PUBLIC, immutable after creation
    perms: int           # PERM_* bits, mutable only via os_set_page_perms

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size


class Memory:
    """Word-addressed memory: 8-byte little-endian cells at 8-aligned
    addresses, each carrying a secret/public taint bit.  Reads of unwritten
    cells inside a mapped page return zero, public."""

    __slots__ = ("pages", "cells", "secret")

    def __init__(self, pages: list[Page]):
        self.pages = pages
        self.cells: dict[int, int] = {}
        self.secret: set[int] = set()

    def clone(self) -> "Memory":
        m = Memory([Page(p.base, p.size, p.kind, p.perms) for p in self.pages])
        m.cells = dict(self.cells)
        m.secret = set(self.secret)
        return m

    def page_at(self, addr: int) -> Optional[Page]:
        for p in self.pages:
            if p.contains(addr):
                return p
        return None

    def page_by_base(self, base: int) -> Optional[Page]:
        for p in self.pages:
            if p.base == base:
                return p
        return None

    # Access predicates evaluated from enclave mode.
    def readable(self, addr: int) -> bool:
        p = self.page_at(addr)
        return p is not None and bool(p.perms & PERM_R)

    def writable(self, addr: int) -> bool:
        p = self.page_at(addr)
        return p is not None and bool(p.perms & PERM_W)

    def executable(self, addr: int) -> bool:
        p = self.page_at(addr)
        return p is not None and bool(p.perms & PERM_X) and p.kind == PRIVATE

    def is_public(self, addr: int) -> bool:
        p = self.page_at(addr)
        return p is not None and p.kind == PUBLIC

    def read(self, addr: int) -> tuple[int, bool]:
        return self.cells.get(addr, 0), addr in self.secret

    def write(self, addr: int, value: int, secret: bool) -> None:
        value &= MASK64
        if value:
            self.cells[addr] = value
        else:
            self.cells.pop(addr, None)
        if secret:
            self.secret.add(addr)
        else:
            self.secret.discard(addr)

    def canonical(self) -> list[tuple[int, int, int]]:
        items = {a: (v, 0) for a, v in self.cells.items() if v}
        for a in self.secret:
            v, _ = items.get(a, (0, 0))
            items[a] = (v, 1)
        return sorted((a, v, s) for a, (v, s) in items.items())


# ---------------------------------------------------------------------------
# SSA frames and TCS
# ---------------------------------------------------------------------------

class SSAFrame:
    """One saved execution context: a full register snapshot plus the
    exit-information fields written by the hardware on async exit."""

    __slots__ = ("regs", "taint", "valid", "vector")

    def __init__(self, regs=None, taint=0, valid=0, vector=0):
        self.regs = list(regs) if regs is not None else [0] * NREGS
        self.taint = taint          # bitmask over register ids
        self.valid = valid
        self.vector = vector

    def clone(self) -> "SSAFrame":
        return SSAFrame(self.regs, self.taint, self.valid, self.vector)

    def canonical(self) -> tuple:
        return (tuple(self.regs), self.taint, self.valid, self.vector)


@dataclass
class TCS:
    entry_point: int
    nssa: int
    ssa_base: int
    cssa: int = 0
    busy: bool = False


# ---------------------------------------------------------------------------
# Hardware extensions (atomicity proposals)
# ---------------------------------------------------------------------------

HW_NONE = "none"
HW_IRQ_QUOTA = "irq_quota"
HW_REENTRY_MASK = "reentry_mask"


@dataclass
class HwExt:
    kind: str = HW_NONE
    # irq_quota contract (installed by the OS via grant_irq_quota)
    allowed: int = 0
    window: int = 0
    used: int = 0
    window_index: int = 0
    granted: bool = False
    # reentry_mask state
    masked: bool = False
    # shared atomic-section state
    atomic: bool = False
    atomic_until: int = 0
    deferred_vector: int = -1

    def clone(self) -> "HwExt":
        return HwExt(self.kind, self.allowed, self.window, self.used,
                     self.window_index, self.granted, self.masked,
                     self.atomic, self.atomic_until, self.deferred_vector)

    def canonical(self) -> tuple:
        return (self.kind, self.allowed, self.window, self.used,
                self.window_index, int(self.granted), int(self.masked),
                int(self.atomic), self.atomic_until, self.deferred_vector)


# ---------------------------------------------------------------------------
# Trace events
# ---------------------------------------------------------------------------
# Every hardware transition and every interpreter step appends exactly one
# event tuple: (kind, pc, a, b, c).  Field meaning per kind:
#   RETIRE      pc, rsp, 0, 0
#   STORE       pc, addr, rsp, 0          memory write by the instruction at pc
#   SP_ASSIGN   pc, new_rsp, 0, 0         rsp written by mov/load
#   CTRL        pc, target, kindcode, rsp kindcode: 0=call 1=ret 2=jmp-indirect
#   FAULT       pc, vector, addr, 0
#   LEAK        pc, src, dst, nbytes
#   EXIT        pc, target, taint_mask, rax   synchronous exit
#   HALT        pc, status, 0, 0
#   HW_EENTER   entry, cmd(rdi), rsi, 0
#   HW_AEX      rip, vector, valid, 0
#   HW_ERESUME  rip_resumed, 0, 0, 0
#   HW_DENIED   0, code, 0, 0             code: 0=no-free-slot 1=masked 2=resume
#   HW_FLIP     page_base, perms, 0, 0
#   HW_GRANT    allowed, window, 0, 0
#   HW_DEFER    rip, vector, 0, 0         async exit deferred by atomic section
#   ADV_*       adversary bookkeeping, appended by the harness

E_RETIRE = 0
E_STORE = 1
E_SP_ASSIGN = 2
E_CTRL = 3
E_FAULT = 4
E_LEAK = 5
E_EXIT = 6
E_HALT = 7
E_HW_EENTER = 8
E_HW_AEX = 9
E_HW_ERESUME = 10
E_HW_DENIED = 11
E_HW_FLIP = 12
E_HW_GRANT = 13
E_HW_DEFER = 14
E_ADV_PREP = 15
E_ADV_INJECT = 16
E_ADV_STOP = 17
E_ADV_SEED = 18
E_MEMR = 19      # pc, addr, stack_flag, 0   memory read by the instruction
E_MEMCPY = 20    # pc, dst, src, nbytes      block copy completed

EVENT_NAMES = [
    "retire", "store", "sp_assign", "ctrl", "fault", "leak", "exit", "halt",
    "eenter", "aex", "eresume", "denied", "flip", "grant", "defer",
    "adv_prep", "adv_inject", "adv_stop", "adv_seed", "memr", "memcpy",
]
EVENT_IDS = {n: i for i, n in enumerate(EVENT_NAMES)}

CTRL_CALL = 0
CTRL_RET = 1
CTRL_JMPI = 2

DENY_NO_FREE_SLOT = 0
DENY_REENTRY_MASKED = 1
DENY_NOTHING_TO_RESUME = 2

MODE_OS = 0
MODE_ENCLAVE = 1


# ---------------------------------------------------------------------------
# Machine
# ---------------------------------------------------------------------------

class Machine:
    """Full platform snapshot plus the hardware transition functions.

    A machine is built once per scenario run from an EnclaveImage and then
    driven by the harness; ``clone`` gives an independent copy for search
    branches.  ``auto_mask`` / ``auto_atomic`` arm the respective extension
    at every synchronous entry (the hardware-managed entry window).
    """

    __slots__ = ("mode", "regs", "taint", "mem", "tcs", "ssa", "aep",
                 "sgx_version", "hw", "cycle", "trace", "auto_mask",
                 "auto_atomic", "entry_atomic_cycles", "pending_fault",
                 "halted")

    def __init__(self, mem: Memory, tcs: TCS, sgx_version: int = SGX2,
                 hw: Optional[HwExt] = None, auto_mask: bool = False,
                 auto_atomic: bool = False, entry_atomic_cycles: int = 32):
        self.mode = MODE_OS
        self.regs = [0] * NREGS
        self.taint = 0
        self.mem = mem
        self.tcs = tcs
        self.ssa = [SSAFrame() for _ in range(tcs.nssa)]
        self.aep = 0
        self.sgx_version = sgx_version
        self.hw = hw if hw is not None else HwExt()
        self.cycle = 0
        self.trace: list[tuple] = []
        self.auto_mask = auto_mask
        self.auto_atomic = auto_atomic
        self.entry_atomic_cycles = entry_atomic_cycles
        self.pending_fault = -1     # vector awaiting the mandatory aex
        self.halted = False

    # -- lifecycle ---------------------------------------------------------

    def clone(self) -> "Machine":
        m = Machine.__new__(Machine)
        m.mode = self.mode
        m.regs = list(self.regs)
        m.taint = self.taint
        m.mem = self.mem.clone()
        m.tcs = TCS(self.tcs.entry_point, self.tcs.nssa, self.tcs.ssa_base,
                    self.tcs.cssa, self.tcs.busy)
        m.ssa = [f.clone() for f in self.ssa]
        m.aep = self.aep
        m.sgx_version = self.sgx_version
        m.hw = self.hw.clone()
        m.cycle = self.cycle
        m.trace = list(self.trace)
        m.auto_mask = self.auto_mask
        m.auto_atomic = self.auto_atomic
        m.entry_atomic_cycles = self.entry_atomic_cycles
        m.pending_fault = self.pending_fault
        m.halted = self.halted
        return m

    def emit(self, kind: int, pc: int, a: int = 0, b: int = 0, c: int = 0):
        self.trace.append((kind, pc, a, b, c))

    # -- synchronous entry / exit -------------------------------------------

    def eenter(self, os_regs: list[int], aep: int) -> None:
        """Enter through the fixed entry point.  Register state passes
        through unchanged apart from rip; nothing is scrubbed or replaced.

        Raises EntryDenied when no context slot is free or, under the
        re-entry-mask extension, when re-entry is masked."""
        if self.mode != MODE_OS:
            raise MachineError("eenter requires OS mode")
        if self.tcs.busy:
            raise MachineError("tcs busy")
        if self.tcs.cssa >= self.tcs.nssa:
            self.emit(E_HW_DENIED, 0, DENY_NO_FREE_SLOT)
            raise EntryDenied("no_free_ssa_slot")
        if (self.hw.kind == HW_REENTRY_MASK and self.hw.masked
                and self.tcs.cssa >= 1):
            self.emit(E_HW_DENIED, 0, DENY_REENTRY_MASKED)
            raise EntryDenied("reentry_masked")
        self.regs = list(os_regs)
        self.taint = 0
        self.regs[RIP] = self.tcs.entry_point
        self.aep = aep
        self.mode = MODE_ENCLAVE
        self.tcs.busy = True
        if self.hw.kind == HW_REENTRY_MASK and self.auto_mask:
            self.hw.masked = True
        if self.hw.kind == HW_IRQ_QUOTA and self.auto_atomic:
            # hardware-armed entry window: charged against the quota; when
            # denied, the entry proceeds without atomicity protection
            self.begin_atomic(self.entry_atomic_cycles)
        self.emit(E_HW_EENTER, self.tcs.entry_point, self.regs[RDI] & MASK64,
                  self.regs[RSI] & MASK64)

    def eexit(self, target: int) -> None:
        """Leave the enclave at `target`.  The hardware does not scrub:
        whatever the runtime left in the registers is what the OS sees."""
        if self.mode != MODE_ENCLAVE:
            raise MachineError("eexit requires enclave mode")
        pc = self.regs[RIP]
        self.mode = MODE_OS
        self.tcs.busy = False
        self.regs[RIP] = target & MASK64
        if self.hw.kind == HW_REENTRY_MASK:
            self.hw.masked = False
        self.hw.atomic = False
        self.hw.deferred_vector = -1   # became an OS-side interrupt
        self.emit(E_EXIT, pc, target & MASK64, self.taint & ~(1 << RIP),
                  self.regs[RAX])

    # -- asynchronous exit / resume ------------------------------------------

    def aex(self, vector: int) -> bool:
        """Asynchronous exit: snapshot the context into the next SSA frame,
        scrub the live registers, and fall back to the recorded aep.

        Returns False (and records a deferral) when the irq-quota extension
        has the enclave inside a granted atomic section."""
        if self.mode != MODE_ENCLAVE:
            raise MachineError("aex requires enclave mode")
        if self.tcs.cssa >= self.tcs.nssa:
            raise MachineError("no reserved ssa slot")  # unreachable by construction
        if self.hw.kind == HW_IRQ_QUOTA and self.hw.atomic:
            self.hw.deferred_vector = vector
            self.emit(E_HW_DEFER, self.regs[RIP], vector)
            return False
        frame = self.ssa[self.tcs.cssa]
        frame.regs = list(self.regs)
        frame.taint = self.taint
        frame.valid = 1 if reports_to_enclave(vector, self.sgx_version) else 0
        frame.vector = vector
        self.tcs.cssa += 1
        self.regs = list(SCRUB_VALUES)
        self.taint = 0
        self.regs[RIP] = self.aep
        self.mode = MODE_OS
        self.tcs.busy = False
        self.pending_fault = -1
        self.emit(E_HW_AEX, frame.regs[RIP], vector, frame.valid)
        return True

    def eresume(self) -> None:
        """Resume from the top SSA frame.  The restored context comes from
        the frame alone; OS register state at the call is irrelevant."""
        if self.mode != MODE_OS:
            raise MachineError("eresume requires OS mode")
        if self.tcs.cssa < 1:
            self.emit(E_HW_DENIED, 0, DENY_NOTHING_TO_RESUME)
            raise ResumeDenied()
        frame = self.ssa[self.tcs.cssa - 1]
        self.tcs.cssa -= 1
        self.regs = list(frame.regs)
        self.taint = frame.taint
        self.mode = MODE_ENCLAVE
        self.tcs.busy = True
        self.emit(E_HW_ERESUME, self.regs[RIP])

    # -- OS-side controls ----------------------------------------------------

    def os_set_page_perms(self, page_base: int, perms: int) -> None:
        if self.mode != MODE_OS:
            raise MachineError("page tables are OS-controlled")
        page = self.mem.page_by_base(page_base)
        if page is None:
            raise UnknownPage(hex(page_base))
        page.perms = perms
        self.emit(E_HW_FLIP, page_base, perms)

    def grant_irq_quota(self, allowed: int, window: int) -> None:
        if self.mode != MODE_OS:
            raise MachineError("the OS approves the quota contract")
        if self.hw.kind != HW_IRQ_QUOTA:
            raise MachineError("irq quota extension not present")
        self.hw.allowed = allowed
        self.hw.window = window
        self.hw.used = 0
        self.hw.window_index = 0
        self.hw.granted = True
        self.emit(E_HW_GRANT, allowed, window)

    def os_read(self, addr: int) -> Optional[int]:
        """OS-mode read: private cells are unreadable and return None (the
        distinguished abort), public cells return their value."""
        page = self.mem.page_at(addr)
        if page is None or page.kind == PRIVATE:
            return None
        return self.mem.read(addr)[0]

    # -- atomic-section accounting (driven by the interpreter) ---------------

    def begin_atomic(self, declared_cycles: int) -> bool:
        """Software request for an interrupt-free window of the declared
        length.  Charged against the per-window quota; the hardware-armed
        entry window is not charged."""
        if self.hw.kind == HW_REENTRY_MASK:
            self.hw.masked = True
            return True
        if self.hw.kind != HW_IRQ_QUOTA:
            return True
        if not self.hw.granted:
            return False
        idx = self.cycle // self.hw.window if self.hw.window else 0
        if idx != self.hw.window_index:
            self.hw.window_index = idx
            self.hw.used = 0
        if self.hw.used + declared_cycles > self.hw.allowed:
            return False
        self.hw.used += declared_cycles
        self.hw.atomic = True
        self.hw.atomic_until = self.cycle + declared_cycles
        return True

    def end_atomic(self) -> Optional[int]:
        """Close the current atomic window.  Returns a deferred vector to be
        delivered now, if one accrued."""
        if self.hw.kind == HW_REENTRY_MASK:
            self.hw.masked = False
            return None
        self.hw.atomic = False
        vec = self.hw.deferred_vector
        self.hw.deferred_vector = -1
        return vec if vec >= 0 else None

    # -- canonical digest ----------------------------------------------------

    def canonical(self) -> tuple:
        """Canonical value of the state.  Field order is fixed: mode,
        registers, register taint, memory cells (sorted), page permissions,
        TCS, SSA frames, aep, version, extension state, cycle."""
        return (
            self.mode,
            tuple(self.regs),
            self.taint,
            tuple(self.mem.canonical()),
            tuple((p.base, p.size, p.kind, p.perms) for p in self.mem.pages),
            (self.tcs.entry_point, self.tcs.cssa, self.tcs.nssa,
             self.tcs.ssa_base, int(self.tcs.busy)),
            tuple(f.canonical() for f in self.ssa),
            self.aep,
            self.sgx_version,
            self.hw.canonical(),
            self.cycle,
            self.pending_fault,
            int(self.halted),
        )

    def digest(self) -> str:
        h = hashlib.sha256(repr(self.canonical()).encode()).hexdigest()
        return h[:16]
