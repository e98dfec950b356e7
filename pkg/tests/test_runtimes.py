"""Runtime-variant behavior: the ocall-return checks, handler stack-pointer
sanity, critical-span emulation, delivery policies, and benign completeness
across every variant."""

import os

import pytest

from aexlab import adversary, explorer, harness, properties, runtimes
from aexlab.harness import (
    BENIGN_OCALL_RESULT, Eenter, InjectAex, PrepareRegs, Stop,
    benign_critical_exception_plan, benign_nested_plan, benign_plan,
    prefix_plan, run_plan,
)
from aexlab.interp import UnknownCriticalRange
from aexlab.machine import E_EXIT, RSP, SGX2, VEC_EXT_INT
from aexlab.runtimes import (
    CMD_EXCEPTION, CMD_ORET, ST_UNHANDLED,
    ThreadDataView, Toggles, build_machine, build_runtime, fixtures_dir,
    generate_source, graphene_emulate, handler_sp_check, postpone_or_ignore,
    validate_oret,
)


def fresh(variant, sgx=SGX2, toggles=None):
    img = build_runtime(variant, toggles=toggles or Toggles())
    m = build_machine(img, sgx)
    if variant == "hw_irq_quota":
        m.grant_irq_quota(100, 10000)
    return img, m


# ---------------------------------------------------------------------------
# ocall-return checks
# ---------------------------------------------------------------------------

def td_view(img, m):
    return ThreadDataView.read(m.mem, img.layout.td_base)


def test_validate_oret_zero_sp():
    img, m = fresh("sdk_style")
    run_plan(m, img, prefix_plan())
    td = td_view(img, m)
    td.last_sp = 0
    assert validate_oret(td, 0, m.mem) == "zero_sp"


def test_validate_oret_inside_guard_band():
    img, m = fresh("sdk_style")
    run_plan(m, img, prefix_plan())
    td = td_view(img, m)
    td.last_sp = td.stack_base_addr - 100   # inside the 30-word band
    assert validate_oret(td, td.last_sp, m.mem) == "sp_too_high"


def test_validate_oret_bad_flag_and_bad_pre():
    img, m = fresh("sdk_style")
    run_plan(m, img, prefix_plan())
    td = td_view(img, m)
    ctx = td.last_sp
    assert validate_oret(td, ctx, m.mem) == "ok"
    flag = m.mem.read(ctx)[0]
    m.mem.write(ctx, flag ^ 1, False)
    assert validate_oret(td, ctx, m.mem) == "bad_flag"
    m.mem.write(ctx, flag, False)
    m.mem.write(ctx + 8, ctx, False)        # pre_last_sp <= ctx
    assert validate_oret(td, ctx, m.mem) == "bad_pre_sp"
    m.mem.write(ctx + 8, td.stack_base_addr + 8, False)
    assert validate_oret(td, ctx, m.mem) == "bad_pre_sp"


def test_crafted_write_bypasses_oret_checks():
    # the corruption span covers the anchor but none of the checked fields
    img, m = fresh("sdk_style")
    run_plan(m, img, prefix_plan())
    plan = adversary.scripted_attack(img, SGX2)
    craft = adversary.craft_sp(img)
    span = range(craft.info_base, craft.info_base + runtimes.INFO_SIZE)
    ctx = td_view(img, m).last_sp
    assert img.anchor_addr in span
    assert ctx not in span and ctx + 8 not in span
    res = run_plan(m, img, plan.actions)
    td = td_view(img, m)
    # checks still pass over the corrupted state: that is the bypass
    assert validate_oret(td, td.last_sp, m.mem) in ("ok", "sp_too_high")
    assert properties.check_anchor_integrity(res.trace, img).violated


# ---------------------------------------------------------------------------
# handler stack-pointer sanity
# ---------------------------------------------------------------------------

def test_handler_sp_check_examples():
    img, m = fresh("sdk_style")
    run_plan(m, img, prefix_plan())
    td = td_view(img, m)
    legit = adversary.craft_sp(img).crafted_rsp
    assert handler_sp_check(legit, td) == "ok"
    assert handler_sp_check(img.layout.pubbuf_base, td) == "out_of_range"
    assert handler_sp_check(td.stack_base_addr, td) == "ok"
    assert handler_sp_check(td.stack_base_addr + 8, td) == "out_of_range"
    assert handler_sp_check(td.stack_base_addr - 8, td) == "misaligned"


def drive_handler_with_sp(img, sp):
    """Deliver an exception whose saved frame carries `sp`; report the
    enclave's verdict through its exit payload."""
    m = build_machine(img, SGX2)
    run_plan(m, img, prefix_plan())
    actions = [
        PrepareRegs.of(rsp=sp, rsi=0),
        InjectAex(VEC_EXT_INT, 0),
        Eenter.of(CMD_ORET),
        Eenter.of(CMD_EXCEPTION, regs={"rsp": 0, "rsi": 0}),
        Stop(),
    ]
    run_plan(m, img, actions)
    exits = [ev for ev in m.trace if ev[0] == E_EXIT]
    return exits[-1][4]


def test_sp_check_flow_matches_predicate_at_bounds():
    # enumerate +-3 words around both bounds; the assembled flow must agree
    # with the standalone predicate
    img = build_runtime("sdk_style")
    m0 = build_machine(img, SGX2)
    run_plan(m0, img, prefix_plan())
    td = td_view(img, m0)
    probes = [td.stack_base_addr + 8 * d for d in range(-3, 4)]
    probes += [td.stack_limit_addr + 8 * d for d in range(-3, 4)]
    for sp in probes:
        want = handler_sp_check(sp, td)
        got = drive_handler_with_sp(img, sp)
        if want == "ok":
            assert got != runtimes.ERR_BAD_SP, hex(sp)
        else:
            assert got == runtimes.ERR_BAD_SP, hex(sp)


# ---------------------------------------------------------------------------
# critical-span emulation
# ---------------------------------------------------------------------------

def graphene_frame_at(img, pc_picker, plan=None):
    """Run a cooperative scenario until the chosen pc, take an async exit
    there, and return (machine, frame)."""
    m = build_machine(img, SGX2)
    target = {}

    def collect(mm):
        pc = mm.regs[16]
        if pc_picker(pc) and "snap" not in target:
            target["snap"] = mm.clone()

    run_plan(m, img, plan or benign_plan(img), before_step=collect)
    snap = target["snap"]
    snap.aex(VEC_EXT_INT)
    return snap, snap.ssa[snap.tcs.cssa - 1]


def test_emulation_identity_at_span_boundary():
    from aexlab.interp import in_crit_ranges
    img = build_runtime("graphene_emulated")
    hi = max(h for _, h in img.crit_ranges)
    assert not in_crit_ranges(img.program, hi)
    m = build_machine(img, SGX2)
    from aexlab.machine import SSAFrame
    frame = SSAFrame()
    frame.regs[16] = hi                     # first address after the span
    out = graphene_emulate(m, img, frame)
    assert out.canonical() == frame.canonical()


def test_emulation_out_of_table_raises():
    img = build_runtime("graphene_emulated")
    m = build_machine(img, SGX2)
    from aexlab.machine import SSAFrame
    frame = SSAFrame()
    frame.regs[16] = img.program.labels["ecall0_body"] + 2
    with pytest.raises(UnknownCriticalRange):
        graphene_emulate(m, img, frame)


def test_emulation_completes_context_restore():
    # interrupt exactly at the instruction that moves the saved context
    # into the stack pointer: the emulated frame must land after the
    # return, stack fully unwound
    img = build_runtime("graphene_emulated")
    labels = img.program.labels
    mov_rsp_pc = None
    for pc in range(labels["oret_flow"], labels["oret_ret"] + 1):
        ins = img.program.code[pc]
        if ins[0] == 0 and ins[1] == RSP:   # mov rsp, r11
            mov_rsp_pc = pc
            break
    assert mov_rsp_pc is not None
    oret_plan = [
        Eenter.of(0, regs={"rsp": 0, "rsi": 0}),
        Eenter.of(CMD_ORET, regs={"rsp": 0, "rsi": BENIGN_OCALL_RESULT}),
        Stop(),
    ]
    snap, frame = graphene_frame_at(img, lambda pc: pc == mov_rsp_pc,
                                    oret_plan)
    ctx = frame.regs[11]                    # r11 holds the validated last_sp
    out = graphene_emulate(snap, img, frame)
    assert out.regs[16] == labels["after_ocall"]
    assert out.regs[RSP] == ctx + 72        # context and anchor popped


def test_emulation_differential_every_offset():
    img = build_runtime("graphene_emulated")
    diff = explorer.emulation_differential(img)
    assert diff.clean, (diff.missing, diff.mismatches)
    assert diff.covered == diff.range_pcs


# ---------------------------------------------------------------------------
# critical-section delivery policies
# ---------------------------------------------------------------------------

def test_postpone_handler_runs_exactly_once_after_drain():
    img = build_runtime("sdk_style",
                        toggles=Toggles(flag_strategy="postpone"))
    m = build_machine(img, SGX2)
    res = run_plan(m, img, benign_critical_exception_plan(img, boundary=5))
    func = properties.check_functionality(res.trace, img)
    assert func.outcome == "no_violation_found"
    assert func.stats["handler_runs"] == 1
    assert any(ev[0] == E_EXIT and ev[4] == runtimes.ST_EXC_POSTPONED
               for ev in res.trace)


def test_postpone_with_empty_pending_set_no_invocation():
    img = build_runtime("sdk_style",
                        toggles=Toggles(flag_strategy="postpone"))
    m = build_machine(img, SGX2)
    res = run_plan(m, img, benign_plan(img)[3:])   # the ocall leg only
    func = properties.check_functionality(res.trace, img)
    assert func.outcome == "no_violation_found"
    assert func.stats["handler_runs"] == 0


def test_ignore_policy_loses_the_exception():
    img = build_runtime("sdk_style", toggles=Toggles(flag_strategy="ignore"))
    m = build_machine(img, SGX2)
    res = run_plan(m, img, benign_critical_exception_plan(img, boundary=5))
    func = properties.check_functionality(res.trace, img)
    assert func.outcome == "functionality_broken"
    assert func.detail == "lost_exception"


def test_quota_defers_mid_window_injection_to_section_end():
    # an exception landing inside the ocall-return window is deferred by
    # the hardware contract and delivered right after the section closes,
    # where the saved frame is already trustworthy
    from aexlab.machine import VEC_PAGE_FAULT
    img = build_runtime("hw_irq_quota")
    m = build_machine(img, SGX2)
    m.grant_irq_quota(100, 10000)
    res = run_plan(m, img, benign_critical_exception_plan(
        img, boundary=5, vector=VEC_PAGE_FAULT))
    from aexlab.machine import E_HW_AEX, E_HW_DEFER
    kinds = [ev[0] for ev in res.trace]
    defer_at = kinds.index(E_HW_DEFER)
    assert E_HW_AEX in kinds[defer_at:]
    func = properties.check_functionality(res.trace, img)
    assert func.outcome == "no_violation_found"
    assert func.stats["handler_runs"] == 1
    assert not properties.any_violation(properties.evaluate(
        res.trace, img, properties.SAFETY_PROPERTIES))


def test_postpone_unit_records_pending():
    img, m = fresh("sdk_style")
    td_base = img.layout.td_base
    m.mem.write(td_base + runtimes.TD_CRIT_FLAG, 1, False)
    td = td_view(img, m)
    out = postpone_or_ignore(td, VEC_EXT_INT, "postpone", m.mem, td_base)
    assert out == "postponed"
    assert m.mem.read(td_base + runtimes.TD_PENDING)[0] == VEC_EXT_INT + 1
    assert postpone_or_ignore(td, VEC_EXT_INT, "ignore", m.mem,
                              td_base) == "ignored"
    td.critical_flag = 0
    with pytest.raises(ValueError):
        postpone_or_ignore(td, VEC_EXT_INT, "postpone", m.mem, td_base)


# ---------------------------------------------------------------------------
# benign completeness and variant behavior
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("variant", runtimes.VARIANTS)
def test_benign_completeness(variant):
    img, m = fresh(variant)
    res = run_plan(m, img, benign_plan(img))
    verdicts = properties.evaluate(res.trace, img, properties.ALL_PROPERTIES)
    func = [v for v in verdicts if v.property_id == "functionality"][0]
    assert not properties.any_violation(verdicts)
    if variant == "nssa_disabled":
        assert func.outcome == "design_limitation"
        assert func.detail == "entry_denied"
    else:
        assert func.outcome == "no_violation_found"
        assert func.stats["handler_runs"] == 1
        done = [ev for ev in res.trace
                if ev[0] == E_EXIT and ev[2] == img.layout.host_done]
        assert done[-1][4] == BENIGN_OCALL_RESULT + 1


def test_benign_anchor_matches_recorded_save():
    for variant in runtimes.VARIANTS:
        if variant == "nssa_disabled":
            continue
        img, m = fresh(variant)
        res = run_plan(m, img, benign_plan(img))
        assert not properties.check_anchor_integrity(res.trace, img).violated


def test_dedicated_stack_rejects_nesting_explicitly():
    img, m = fresh("dedicated_stack")
    res = run_plan(m, img, benign_nested_plan(img))
    func = properties.check_functionality(res.trace, img)
    assert func.outcome == "design_limitation"
    assert func.detail == "no_nesting"
    assert any(ev[0] == E_EXIT and ev[4] == ST_UNHANDLED for ev in res.trace)
    # never silent corruption: the other detectors stay quiet
    assert not properties.any_violation(
        properties.evaluate(res.trace, img, properties.SAFETY_PROPERTIES))


def test_cssa_bounds_hold_through_benign_runs():
    img, m = fresh("dedicated_stack")

    def check():
        assert 0 <= m.tcs.cssa <= m.tcs.nssa

    run_plan(m, img, benign_nested_plan(img), after_events=check)


# ---------------------------------------------------------------------------
# image construction
# ---------------------------------------------------------------------------

def test_unknown_variant_rejected():
    with pytest.raises(runtimes.UnknownVariant):
        build_runtime("no_such_runtime")


def test_layout_overlap_rejected():
    bad = runtimes.Layout(td_base=0x20000)   # collides with the stack
    with pytest.raises(runtimes.LayoutOverlap):
        build_runtime("sdk_style", layout=bad)


def test_gadgets_are_code_addresses():
    for variant in runtimes.VARIANTS:
        img = build_runtime(variant)
        for name, addr in img.gadgets.items():
            assert addr in img.program.code, (variant, name)


def test_fixture_sources_match_generator():
    # the committed fixtures are the canonical, reviewable programs
    for variant in runtimes.VARIANTS:
        path = os.path.join(fixtures_dir(), f"{variant}.easm")
        with open(path) as fh:
            assert fh.read() == generate_source(variant), variant


def test_toggle_removes_validity_check():
    with_check = generate_source("sdk_style")
    without = generate_source(
        "sdk_style", Toggles(sgx1_valid_check_removed=True))
    assert "exitinfo_valid" in with_check
    assert "exitinfo_valid" not in without
    # exactly the one-line check (read + branch) disappears
    delta = len(with_check.splitlines()) - len(without.splitlines())
    assert delta == 2
