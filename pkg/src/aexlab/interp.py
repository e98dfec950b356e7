"""Instruction interpreter with taint propagation and fault detection.

``step`` applies one instruction to a Machine, emitting one primary trace
event (plus Leak events when secret data lands in public memory).  A fault
leaves rip at the faulting instruction and arms ``machine.pending_fault``;
the only legal next hardware transition is then an asynchronous exit of
that class.

``complete_critical`` is the register-level twin used to finish an
interrupted critical span against a saved frame instead of live registers.
"""

from __future__ import annotations

from .isa import (
    OP_MOV_RR, OP_MOV_RI, OP_LOAD, OP_STORE, OP_PUSH, OP_POP,
    OP_ADD_I, OP_SUB_I, OP_AND_I, OP_CMPJ_I, OP_CMPJ_R,
    OP_JMP, OP_JMP_REG, OP_CALL, OP_RET,
    OP_MEMCPY, OP_SCRUB, OP_READ_SSA, OP_WRITE_SSA, OP_EEXIT_R, OP_EEXIT_I,
    OP_BEGIN_ATOMIC, OP_END_ATOMIC, OP_SET_FLAG, OP_CLEAR_FLAG,
    OP_HALT, OP_TRAP, OP_DECLASSIFY, OP_EMULATE_CRITICAL,
    SSA_FIELD_VALID, SSA_FIELD_VECTOR, Program, render,
)
from .machine import (
    CTRL_CALL, CTRL_JMPI, CTRL_RET, E_CTRL, E_FAULT, E_HALT, E_LEAK,
    E_MEMCPY, E_MEMR, E_RETIRE, E_SP_ASSIGN, E_STORE, MASK64, MODE_ENCLAVE,
    NREGS, RAX, RIP, RSP, SCRUB_VALUES, SSAFrame, VEC_AC, VEC_PAGE_FAULT,
    Machine,
)

# Exit statuses for Halt; ABORT marks an in-enclave consistency trap
# (e.g. reading a saved frame when none exists), which poisons the thread.
ST_ABORT = 0xAB07


class InterpError(Exception):
    """Interpreter misuse or an unemulable situation: a harness/model bug."""


def _rel_holds(rel: int, lhs: int, rhs: int) -> bool:
    # unsigned 64-bit relations
    if rel == 0:
        return lhs == rhs
    if rel == 1:
        return lhs != rhs
    if rel == 2:
        return lhs < rhs
    if rel == 3:
        return lhs <= rhs
    if rel == 4:
        return lhs > rhs
    return lhs >= rhs


def _fault(m: Machine, pc: int, vector: int, addr: int) -> str:
    m.pending_fault = vector
    m.emit(E_FAULT, pc, vector, addr)
    return "fault"


def step(m: Machine, program: Program) -> str:
    """Execute one instruction.  Returns a signal for the harness:
    "ok", "fault", "exit", "halt"."""
    if m.mode != MODE_ENCLAVE:
        raise InterpError("step requires enclave mode")
    if m.pending_fault >= 0:
        raise InterpError("pending fault must be delivered via aex")
    pc = m.regs[RIP]
    if not m.mem.executable(pc):
        return _fault(m, pc, VEC_PAGE_FAULT, pc)
    ins = program.code.get(pc)
    if ins is None:
        return _fault(m, pc, VEC_PAGE_FAULT, pc)
    op, a, b, c = ins
    regs = m.regs
    mem = m.mem

    def taint_of(r: int) -> bool:
        return bool(m.taint & (1 << r))

    def set_taint(r: int, t: bool) -> None:
        if t:
            m.taint |= (1 << r)
        else:
            m.taint &= ~(1 << r)

    def retire(next_pc: int | None = None) -> str:
        regs[RIP] = (pc + 1) if next_pc is None else next_pc
        m.cycle += 1
        return "ok"

    # -- moves / arithmetic -------------------------------------------------
    if op == OP_MOV_RR:
        regs[a] = regs[b]
        set_taint(a, taint_of(b))
        if a == RSP:
            m.emit(E_SP_ASSIGN, pc, regs[RSP])
        else:
            m.emit(E_RETIRE, pc, regs[RSP])
        return retire()
    if op == OP_MOV_RI:
        regs[a] = b
        set_taint(a, False)
        if a == RSP:
            m.emit(E_SP_ASSIGN, pc, regs[RSP])
        else:
            m.emit(E_RETIRE, pc, regs[RSP])
        return retire()
    if op in (OP_ADD_I, OP_SUB_I, OP_AND_I):
        if op == OP_ADD_I:
            regs[a] = (regs[a] + b) & MASK64
        elif op == OP_SUB_I:
            regs[a] = (regs[a] - b) & MASK64
        else:
            regs[a] = regs[a] & b
        m.emit(E_RETIRE, pc, regs[RSP])
        return retire()

    # -- memory ---------------------------------------------------------------
    if op == OP_LOAD:
        addr = (regs[b] + c) & MASK64
        if not mem.readable(addr):
            return _fault(m, pc, VEC_PAGE_FAULT, addr)
        val, sec = mem.read(addr)
        regs[a] = val
        set_taint(a, sec)
        if a == RSP:
            m.emit(E_SP_ASSIGN, pc, regs[RSP])
        else:
            m.emit(E_MEMR, pc, addr, 1 if b == RSP else 0)
        return retire()
    if op == OP_STORE:
        addr = (regs[a] + b) & MASK64
        if not mem.writable(addr):
            return _fault(m, pc, VEC_PAGE_FAULT, addr)
        sec = taint_of(c)
        mem.write(addr, regs[c], sec)
        m.emit(E_STORE, pc, addr, regs[RSP], 1 if a == RSP else 0)
        if sec and mem.is_public(addr):
            m.emit(E_LEAK, pc, 0, addr, 8)
        return retire()
    if op == OP_PUSH:
        addr = (regs[RSP] - 8) & MASK64
        if not mem.writable(addr):
            return _fault(m, pc, VEC_PAGE_FAULT, addr)
        sec = taint_of(a)
        mem.write(addr, regs[a], sec)
        regs[RSP] = addr
        m.emit(E_STORE, pc, addr, addr, 1)
        if sec and mem.is_public(addr):
            m.emit(E_LEAK, pc, 0, addr, 8)
        return retire()
    if op == OP_POP:
        addr = regs[RSP]
        if not mem.readable(addr):
            return _fault(m, pc, VEC_PAGE_FAULT, addr)
        val, sec = mem.read(addr)
        regs[a] = val
        set_taint(a, sec)
        regs[RSP] = (addr + 8) & MASK64
        if a == RSP:
            m.emit(E_SP_ASSIGN, pc, regs[RSP])
        else:
            m.emit(E_MEMR, pc, addr, 1)
        return retire()

    # -- control ---------------------------------------------------------------
    if op == OP_CMPJ_I or op == OP_CMPJ_R:
        rhs = b if op == OP_CMPJ_I else regs[b]
        rel, target = c
        m.emit(E_RETIRE, pc, regs[RSP])
        return retire(target if _rel_holds(rel, regs[a], rhs) else None)
    if op == OP_JMP:
        m.emit(E_RETIRE, pc, regs[RSP])
        return retire(a)
    if op == OP_JMP_REG:
        m.emit(E_CTRL, pc, regs[a], CTRL_JMPI, regs[RSP])
        return retire(regs[a])
    if op == OP_CALL:
        addr = (regs[RSP] - 8) & MASK64
        if not mem.writable(addr):
            return _fault(m, pc, VEC_PAGE_FAULT, addr)
        mem.write(addr, pc + 1, False)
        regs[RSP] = addr
        m.emit(E_CTRL, pc, a, CTRL_CALL, addr)
        return retire(a)
    if op == OP_RET:
        addr = regs[RSP]
        if not mem.readable(addr):
            return _fault(m, pc, VEC_PAGE_FAULT, addr)
        target, _sec = mem.read(addr)
        regs[RSP] = (addr + 8) & MASK64
        m.emit(E_CTRL, pc, target, CTRL_RET, regs[RSP])
        return retire(target)

    # -- block copy -------------------------------------------------------------
    if op == OP_MEMCPY:
        return _memcpy(m, program, pc, regs[a], regs[b], regs[c])

    # -- runtime/hardware helpers -------------------------------------------------
    if op == OP_SCRUB:
        for r in range(NREGS):
            if a & (1 << r):
                regs[r] = SCRUB_VALUES[r]
                set_taint(r, False)
        m.emit(E_RETIRE, pc, regs[RSP])
        return retire()
    if op == OP_READ_SSA:
        if m.tcs.cssa < 1:
            m.halted = True
            m.emit(E_HALT, pc, ST_ABORT)
            return "halt"
        frame = m.ssa[m.tcs.cssa - 1]
        val, sec = _frame_field(frame, b)
        regs[a] = val
        set_taint(a, sec)
        if a == RSP:
            m.emit(E_SP_ASSIGN, pc, regs[RSP])
        else:
            m.emit(E_RETIRE, pc, regs[RSP])
        return retire()
    if op == OP_WRITE_SSA:
        if m.tcs.cssa < 1:
            m.halted = True
            m.emit(E_HALT, pc, ST_ABORT)
            return "halt"
        frame = m.ssa[m.tcs.cssa - 1]
        _set_frame_field(frame, a, regs[b], taint_of(b))
        m.emit(E_RETIRE, pc, regs[RSP])
        return retire()
    if op == OP_EEXIT_R or op == OP_EEXIT_I:
        target = regs[a] if op == OP_EEXIT_R else a
        m.cycle += 1
        m.eexit(target)
        return "exit"
    if op == OP_BEGIN_ATOMIC:
        ok = m.begin_atomic(a)
        regs[RAX] = 1 if ok else 0
        set_taint(RAX, False)
        m.emit(E_RETIRE, pc, regs[RSP])
        return retire()
    if op == OP_END_ATOMIC:
        deferred = m.end_atomic()
        m.emit(E_RETIRE, pc, regs[RSP])
        out = retire()
        if deferred is not None:
            m.pending_fault = deferred
            return "fault"
        return out
    if op == OP_SET_FLAG or op == OP_CLEAR_FLAG:
        if not mem.writable(a):
            return _fault(m, pc, VEC_PAGE_FAULT, a)
        mem.write(a, 1 if op == OP_SET_FLAG else 0, False)
        m.emit(E_STORE, pc, a, regs[RSP])
        return retire()
    if op == OP_HALT:
        m.halted = True
        m.emit(E_HALT, pc, a)
        return "halt"
    if op == OP_TRAP:
        return _fault(m, pc, a, pc)
    if op == OP_DECLASSIFY:
        set_taint(a, False)
        m.emit(E_RETIRE, pc, regs[RSP])
        return retire()
    if op == OP_EMULATE_CRITICAL:
        if m.tcs.cssa < 1:
            m.halted = True
            m.emit(E_HALT, pc, ST_ABORT)
            return "halt"
        frame = m.ssa[m.tcs.cssa - 1]
        # classify first: contexts interrupted outside the registered spans
        # are already safe and pass through unchanged
        if in_crit_ranges(program, frame.regs[RIP]):
            m.ssa[m.tcs.cssa - 1] = complete_critical(m, program, frame)
        m.emit(E_RETIRE, pc, regs[RSP])
        return retire()
    raise InterpError(f"cannot interpret {render(ins)} at {pc:#x}")


def _frame_field(frame: SSAFrame, field: int) -> tuple[int, bool]:
    if field == SSA_FIELD_VALID:
        return frame.valid, False
    if field == SSA_FIELD_VECTOR:
        return frame.vector, False
    return frame.regs[field], bool(frame.taint & (1 << field))


def _set_frame_field(frame: SSAFrame, field: int, value: int, sec: bool) -> None:
    if field in (SSA_FIELD_VALID, SSA_FIELD_VECTOR):
        raise InterpError("exit information is hardware-owned")
    frame.regs[field] = value & MASK64
    if sec:
        frame.taint |= (1 << field)
    else:
        frame.taint &= ~(1 << field)


def _memcpy(m: Machine, program: Program, pc: int, dst: int, src: int,
            nbytes: int) -> str:
    """Word-granular copy, ascending, not atomic: a permission fault midway
    leaves the already-copied prefix in place."""
    if dst % 8 or src % 8 or nbytes % 8:
        return _fault(m, pc, VEC_AC, dst | src | nbytes)
    mem = m.mem
    run_len = 0
    run_src = run_dst = 0

    def flush_run():
        nonlocal run_len
        if run_len:
            m.emit(E_LEAK, pc, run_src, run_dst, run_len * 8)
            run_len = 0

    for i in range(nbytes // 8):
        s = (src + 8 * i) & MASK64
        d = (dst + 8 * i) & MASK64
        if not mem.readable(s):
            flush_run()
            return _fault(m, pc, VEC_PAGE_FAULT, s)
        if not mem.writable(d):
            flush_run()
            return _fault(m, pc, VEC_PAGE_FAULT, d)
        val, sec = mem.read(s)
        mem.write(d, val, sec)
        if sec and mem.is_public(d):
            if run_len == 0:
                run_src, run_dst = s, d
            run_len += 1
        else:
            flush_run()
    flush_run()
    m.emit(E_MEMCPY, pc, dst, src, nbytes)
    m.regs[RIP] = pc + 1
    m.cycle += 1
    return "ok"


# ---------------------------------------------------------------------------
# Critical-span completion against a saved frame
# ---------------------------------------------------------------------------

def in_crit_ranges(program: Program, pc: int) -> bool:
    return any(lo <= pc < hi for lo, hi in program.crit_ranges.values())


class UnknownCriticalRange(Exception):
    """The interrupted address is not covered by the range table: the table
    is incomplete, which is a modeling bug that must surface loudly."""


def complete_critical(m: Machine, program: Program, frame: SSAFrame,
                      max_steps: int = 10000) -> SSAFrame:
    """Return the frame that native execution would have produced had the
    thread run from the interrupted address to the end of its critical span
    before the asynchronous exit happened.

    Operates on a copy of the frame; register effects land in the copy,
    memory effects land in machine memory (critical spans only write
    private cells the interrupted thread owns).  An interrupted address at
    a span boundary means there is nothing to finish: identity.
    """
    pc = frame.regs[RIP]
    boundary = any(pc == hi for _, hi in program.crit_ranges.values())
    if not in_crit_ranges(program, pc) and not boundary:
        raise UnknownCriticalRange(hex(pc))

    regs = list(frame.regs)
    taint = frame.taint

    def taint_of(r):
        return bool(taint & (1 << r))

    def set_taint(r, t):
        nonlocal taint
        if t:
            taint |= (1 << r)
        else:
            taint &= ~(1 << r)

    mem = m.mem
    steps = 0
    while in_crit_ranges(program, pc):
        if steps >= max_steps:
            raise InterpError("critical completion did not terminate")
        steps += 1
        ins = program.code.get(pc)
        if ins is None:
            raise UnknownCriticalRange(hex(pc))
        op, a, b, c = ins
        if op in (OP_EEXIT_R, OP_EEXIT_I):
            break  # the span ends by leaving the enclave; stop short of it
        if op == OP_MOV_RR:
            regs[a] = regs[b]
            set_taint(a, taint_of(b))
        elif op == OP_MOV_RI:
            regs[a] = b
            set_taint(a, False)
        elif op == OP_ADD_I:
            regs[a] = (regs[a] + b) & MASK64
        elif op == OP_SUB_I:
            regs[a] = (regs[a] - b) & MASK64
        elif op == OP_AND_I:
            regs[a] = regs[a] & b
        elif op == OP_LOAD:
            val, sec = mem.read((regs[b] + c) & MASK64)
            regs[a] = val
            set_taint(a, sec)
        elif op == OP_STORE:
            mem.write((regs[a] + b) & MASK64, regs[c], taint_of(c))
        elif op == OP_PUSH:
            regs[RSP] = (regs[RSP] - 8) & MASK64
            mem.write(regs[RSP], regs[a], taint_of(a))
        elif op == OP_POP:
            val, sec = mem.read(regs[RSP])
            regs[a] = val
            set_taint(a, sec)
            regs[RSP] = (regs[RSP] + 8) & MASK64
        elif op == OP_SCRUB:
            for r in range(NREGS):
                if a & (1 << r):
                    regs[r] = SCRUB_VALUES[r]
                    set_taint(r, False)
        elif op == OP_CMPJ_I or op == OP_CMPJ_R:
            rhs = b if op == OP_CMPJ_I else regs[b]
            rel, target = c
            if _rel_holds(rel, regs[a], rhs):
                pc = target
                continue
        elif op == OP_JMP:
            pc = a
            continue
        elif op == OP_RET:
            val, _sec = mem.read(regs[RSP])
            regs[RSP] = (regs[RSP] + 8) & MASK64
            pc = val
            continue
        elif op == OP_SET_FLAG:
            mem.write(a, 1, False)
        elif op == OP_CLEAR_FLAG:
            mem.write(a, 0, False)
        elif op == OP_READ_SSA:
            if m.tcs.cssa < 2:
                raise InterpError("no underlying frame to read during completion")
            under = m.ssa[m.tcs.cssa - 2]
            val, sec = _frame_field(under, b)
            regs[a] = val
            set_taint(a, sec)
        else:
            raise InterpError(
                f"instruction not completable in a critical span: {render(ins)}")
        pc += 1

    out = SSAFrame(regs, taint, frame.valid, frame.vector)
    out.regs[RIP] = pc
    return out
