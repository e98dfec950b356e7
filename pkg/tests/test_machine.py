"""Hardware-model unit and property tests: entry/exit/async-exit
semantics, save/restore fidelity, scrubbing, and determinism."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aexlab.interp import step
from aexlab.machine import (
    E_HW_AEX, E_RETIRE, EntryDenied, HW_REENTRY_MASK, HwExt, MASK64,
    MODE_ENCLAVE, MODE_OS, NREGS, PERM_R, PERM_X, RDI, RIP,
    RSP, ResumeDenied, SCRUB_VALUES, SGX1, SGX2, SYNC_VECTORS,
    UnknownPage, VEC_DIV, VEC_EXT_INT, VEC_PAGE_FAULT, reports_to_enclave,
)

from conftest import CODE, DATA, make_raw_machine


def enclave_machine(nssa=2):
    m, prog = make_raw_machine("start:\n    jmp start\n", nssa=nssa)
    return m, prog


# ---------------------------------------------------------------------------
# eenter
# ---------------------------------------------------------------------------

def test_eenter_denied_when_no_slot_free():
    m, _ = enclave_machine(nssa=1)
    m.aex(VEC_EXT_INT)
    assert m.tcs.cssa == 1
    with pytest.raises(EntryDenied) as e:
        m.eenter([0] * NREGS, aep=0x4000)
    assert e.value.reason == "no_free_ssa_slot"


def test_eenter_registers_pass_through():
    m, _ = enclave_machine()
    m.eexit(0x4000)
    os_regs = [0] * NREGS
    os_regs[RDI] = 0xDEAD
    m.eenter(os_regs, aep=0x4000)
    assert m.mode == MODE_ENCLAVE
    assert m.regs[RIP] == m.tcs.entry_point
    assert m.regs[RDI] == 0xDEAD


def test_eenter_then_eexit_identity():
    m, _ = enclave_machine()
    m.eexit(0x4000)
    os_regs = [0x1111 * (i + 1) for i in range(NREGS)]
    m.eenter(list(os_regs), aep=0x4000)
    m.eexit(0x4321)
    for i in range(NREGS):
        if i == RIP:
            assert m.regs[i] == 0x4321
        else:
            assert m.regs[i] == os_regs[i]


def test_eenter_requires_os_mode_and_free_tcs():
    m, _ = enclave_machine()
    from aexlab.machine import MachineError
    with pytest.raises(MachineError):
        m.eenter([0] * NREGS, aep=0)


# ---------------------------------------------------------------------------
# aex / eresume
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("vector,version,valid", [
    (VEC_PAGE_FAULT, SGX1, 0),
    (VEC_PAGE_FAULT, SGX2, 1),
    (VEC_DIV, SGX1, 1),
    (VEC_DIV, SGX2, 1),
    (VEC_EXT_INT, SGX1, 0),
    (VEC_EXT_INT, SGX2, 0),
])
def test_aex_exit_information_validity(vector, version, valid):
    m, _ = enclave_machine()
    m.sgx_version = version
    m.aex(vector)
    frame = m.ssa[0]
    assert frame.valid == valid
    assert frame.vector == vector


def test_reports_to_enclave_sync_family():
    for v in SYNC_VECTORS:
        assert reports_to_enclave(v, SGX1) and reports_to_enclave(v, SGX2)


def test_aex_scrubs_registers():
    m, _ = enclave_machine()
    m.regs = [0xAA00 + i for i in range(NREGS)]
    m.regs[RIP] = CODE
    m.taint = 0b1010
    m.aex(VEC_EXT_INT)
    assert m.mode == MODE_OS
    assert m.taint == 0
    for i in range(NREGS):
        if i == RIP:
            assert m.regs[i] == m.aep
        else:
            assert m.regs[i] == SCRUB_VALUES[i]


def test_aex_eresume_roundtrip_bit_identical():
    m, _ = enclave_machine()
    snapshot = [0xC0FFEE00 + 7 * i for i in range(NREGS)]
    m.regs = list(snapshot)
    m.taint = 0b110011
    m.aex(VEC_PAGE_FAULT)
    m.eresume()
    assert m.regs == snapshot
    assert m.taint == 0b110011
    assert m.mode == MODE_ENCLAVE


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=MASK64), min_size=NREGS,
                max_size=NREGS),
       st.sampled_from(sorted(SYNC_VECTORS | {VEC_PAGE_FAULT, VEC_EXT_INT})),
       st.integers(min_value=0, max_value=(1 << NREGS) - 1))
def test_roundtrip_property(regs, vector, taint):
    m, _ = enclave_machine()
    m.regs = list(regs)
    m.taint = taint
    m.aex(vector)
    m.eresume()
    assert m.regs == list(regs)
    assert m.taint == taint


def test_eresume_denied_when_nothing_saved():
    m, _ = enclave_machine()
    m.eexit(0x4000)
    with pytest.raises(ResumeDenied):
        m.eresume()


def test_eresume_ignores_os_registers():
    # exhaustive over a small register-value domain: the restored file
    # depends on the saved frame alone
    domain = [0, 1, 0xDEAD, MASK64]
    m0, _ = enclave_machine()
    saved = [0xBEEF00 + i for i in range(NREGS)]
    m0.regs = list(saved)
    m0.aex(VEC_EXT_INT)
    for value in domain:
        m = m0.clone()
        m.regs = [value] * NREGS          # OS tampers with live registers
        m.eresume()
        assert m.regs == saved


def test_resume_rip_comes_from_saved_frame():
    m, _ = enclave_machine()
    m.regs[RIP] = CODE
    m.aex(VEC_EXT_INT)
    m.ssa[0].regs[RIP] = CODE  # handler may rewrite it; resume must follow
    m.ssa[0].regs[RIP] = 0x1005
    m.eresume()
    assert m.regs[RIP] == 0x1005


# ---------------------------------------------------------------------------
# entry gating enumeration
# ---------------------------------------------------------------------------

def test_entry_gating_exhaustive():
    # eenter succeeds iff a save slot is free and re-entry is not masked
    for cssa in range(4):
        for nssa in range(4):
            for masked in (False, True):
                m, _ = enclave_machine(nssa=max(nssa, 1))
                m.eexit(0x4000)
                m.tcs.nssa = nssa
                m.tcs.cssa = cssa
                m.hw = HwExt(kind=HW_REENTRY_MASK, masked=masked)
                expect = cssa < nssa and not (masked and cssa >= 1)
                try:
                    m.eenter([0] * NREGS, aep=0x4000)
                    assert expect, (cssa, nssa, masked)
                except EntryDenied:
                    assert not expect, (cssa, nssa, masked)


def test_cssa_bounds_hold_across_transitions():
    m, prog = enclave_machine(nssa=2)
    ops = [lambda: m.aex(VEC_EXT_INT), m.eresume,
           lambda: m.aex(VEC_PAGE_FAULT), m.eresume]
    for op in ops:
        op()
        assert 0 <= m.tcs.cssa <= m.tcs.nssa


# ---------------------------------------------------------------------------
# page permissions
# ---------------------------------------------------------------------------

def test_flip_entry_page_faults_before_first_retire():
    m, prog = enclave_machine()
    m.eexit(0x4000)
    m.os_set_page_perms(CODE, PERM_R)      # non-executable
    m.eenter([0] * NREGS, aep=0x4000)
    mark = len(m.trace)
    sig = step(m, prog)
    assert sig == "fault"
    assert m.pending_fault == VEC_PAGE_FAULT
    assert not any(ev[0] == E_RETIRE for ev in m.trace[mark:])
    m.aex(m.pending_fault)
    assert m.trace[-1][0] == E_HW_AEX
    # restore and re-enter: the first instruction now executes
    m.os_set_page_perms(CODE, PERM_R | PERM_X)
    m.eresume()
    assert step(m, prog) == "ok"


def test_perm_flip_idempotent_digest():
    m, _ = enclave_machine()
    m.eexit(0x4000)
    page = m.mem.page_by_base(CODE)
    before = m.digest()
    events = len(m.trace)
    m.os_set_page_perms(CODE, page.perms)
    assert m.digest() == before
    assert len(m.trace) == events + 1


def test_unknown_page():
    m, _ = enclave_machine()
    m.eexit(0x4000)
    with pytest.raises(UnknownPage):
        m.os_set_page_perms(0x999000, PERM_R)


def test_private_memory_unreadable_from_os():
    m, _ = enclave_machine()
    m.mem.write(DATA, 0x5EC, True)
    m.eexit(0x4000)
    assert m.os_read(DATA) is None         # distinguished abort
    m.mem.write(0x40010, 42, False)
    assert m.os_read(0x40010) == 42


# ---------------------------------------------------------------------------
# atomicity extensions
# ---------------------------------------------------------------------------

def test_quota_zero_denies_every_request():
    m, _ = enclave_machine()
    m.hw = HwExt(kind="irq_quota")
    m.eexit(0x4000)
    m.grant_irq_quota(0, 10000)
    m.eenter([0] * NREGS, aep=0x4000)
    assert m.begin_atomic(1) is False
    assert m.begin_atomic(0) is True       # zero-length request fits


def test_quota_defers_injection_inside_section():
    m, _ = enclave_machine()
    m.hw = HwExt(kind="irq_quota")
    m.eexit(0x4000)
    m.grant_irq_quota(100, 10000)
    m.eenter([0] * NREGS, aep=0x4000)
    assert m.begin_atomic(40) is True
    assert m.aex(VEC_EXT_INT) is False     # deferred, not delivered
    assert m.hw.deferred_vector == VEC_EXT_INT
    assert m.mode == MODE_ENCLAVE
    assert m.end_atomic() == VEC_EXT_INT   # delivered at section end


def test_quota_accounting_per_window():
    m, _ = enclave_machine()
    m.hw = HwExt(kind="irq_quota")
    m.eexit(0x4000)
    m.grant_irq_quota(100, 10000)
    m.eenter([0] * NREGS, aep=0x4000)
    assert m.begin_atomic(60)
    m.end_atomic()
    assert m.begin_atomic(60) is False     # 120 > 100 within this window
    m.cycle = 10001                        # next window: quota replenishes
    assert m.begin_atomic(60) is True


def test_mask_cleared_by_end_atomic_and_eexit():
    m, _ = enclave_machine()
    m.hw = HwExt(kind=HW_REENTRY_MASK)
    m.auto_mask = True
    m.eexit(0x4000)
    m.eenter([0] * NREGS, aep=0x4000)
    assert m.hw.masked
    m.end_atomic()
    assert not m.hw.masked
    m.begin_atomic(0)
    assert m.hw.masked
    m.eexit(0x4000)
    assert not m.hw.masked


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

def test_identical_event_sequences_identical_digests():
    def drive():
        m, prog = enclave_machine()
        m.regs[RSP] = DATA + 0x800
        for _ in range(5):
            step(m, prog)
        m.aex(VEC_EXT_INT)
        m.eresume()
        return m.digest()

    assert drive() == drive()


def test_clone_is_independent():
    m, prog = enclave_machine()
    c = m.clone()
    assert c.digest() == m.digest()
    c.mem.write(DATA, 77, False)
    c.regs[0] = 1
    assert c.digest() != m.digest()
    assert m.mem.read(DATA) == (0, False)
