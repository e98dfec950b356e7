"""Adversary behavior: scripted-plan feasibility, the exhaustive
certification oracle, plan determinism, and the randomized-stack bypass."""

import pytest

from aexlab import adversary, harness, properties
from aexlab.adversary import (
    BudgetExceeded, Counterexample, NoneFound, PlanInfeasible, SearchBudget,
    default_domain, estimate_single_shot_rate, exact_single_shot_rate,
    exhaustive_attacker, multi_round_aslr, scripted_attack,
)
from aexlab.harness import prefix_plan, run_plan
from aexlab.machine import SGX1, SGX2, VEC_EXT_INT, VEC_PAGE_FAULT
from aexlab.runtimes import Toggles, build_machine, build_runtime

VULNERABLE = [
    ("sdk_style", SGX2, Toggles(), (VEC_PAGE_FAULT, VEC_EXT_INT)),
    ("open_enclave_style", SGX2, Toggles(), (VEC_PAGE_FAULT, VEC_EXT_INT)),
    ("open_enclave_style", SGX1, Toggles(), (VEC_EXT_INT,)),
    ("enarx_style", SGX2, Toggles(), (VEC_PAGE_FAULT, VEC_EXT_INT)),
    ("sdk_style", SGX1, Toggles(sgx1_valid_check_removed=True),
     (VEC_PAGE_FAULT, VEC_EXT_INT)),
]

IMMUNE = [
    ("graphene_emulated", SGX2),
    ("dedicated_stack", SGX2),
    ("nssa_disabled", SGX2),
    ("hw_reentry_mask", SGX2),
    ("hw_irq_quota", SGX2),
    ("sdk_style", SGX1),
]


def run_scripted(variant, sgx, toggles, classes):
    img = build_runtime(variant, toggles=toggles)
    plan = scripted_attack(img, sgx, classes=classes)
    m = build_machine(img, sgx)
    run_plan(m, img, prefix_plan())
    res = run_plan(m, img, plan.actions)
    return img, plan, res


# ---------------------------------------------------------------------------
# scripted plans
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("variant,sgx,toggles,classes", VULNERABLE)
def test_scripted_reaches_all_milestones(variant, sgx, toggles, classes):
    img, plan, res = run_scripted(variant, sgx, toggles, classes)
    reached = properties.milestones(res.trace, img)
    assert reached == ("anchor_written", "pivoted", "leaked")
    verdicts = properties.evaluate(res.trace, img,
                                   ("anchor_integrity", "cfi",
                                    "confidentiality"))
    assert all(v.violated for v in verdicts)


def test_scripted_sdk_sgx1_with_check_intact_infeasible():
    img = build_runtime("sdk_style")
    with pytest.raises(PlanInfeasible) as e:
        scripted_attack(img, SGX1)
    assert "valid" in e.value.reason


@pytest.mark.parametrize("variant,sgx", IMMUNE[:-1])
def test_scripted_infeasible_on_immune_designs(variant, sgx):
    img = build_runtime(variant)
    with pytest.raises(PlanInfeasible):
        scripted_attack(img, sgx)


def test_scripted_leaks_whole_modeled_key():
    img, plan, res = run_scripted("sdk_style", SGX2, Toggles(),
                                  (VEC_PAGE_FAULT,))
    v = properties.check_confidentiality(res.trace, img)
    assert v.violated
    leak = res.trace[v.witness_index]
    assert leak[4] == img.layout.secret_len == 128


def test_plan_replay_is_deterministic():
    img = build_runtime("sdk_style")
    plan = scripted_attack(img, SGX2)

    def go():
        m = build_machine(img, SGX2)
        run_plan(m, img, prefix_plan())
        run_plan(m, img, plan.actions)
        return m.trace, m.digest()

    t1, d1 = go()
    t2, d2 = go()
    assert t1 == t2 and d1 == d2


# ---------------------------------------------------------------------------
# exhaustive certification
# ---------------------------------------------------------------------------

def test_domain_has_twelve_words():
    img = build_runtime("sdk_style")
    assert len(default_domain(img).words) == 12


def test_exhaustive_rediscovers_without_hints():
    img = build_runtime("sdk_style")
    out = exhaustive_attacker(img, SGX2)
    assert isinstance(out, Counterexample)
    reached = properties.milestones(out.trace, img)
    assert "anchor_written" in reached
    # the scripted plan's trace reaches the same opening milestone
    plan = scripted_attack(img, SGX2)
    m = build_machine(img, SGX2)
    run_plan(m, img, prefix_plan())
    res = run_plan(m, img, plan.actions)
    assert "anchor_written" in properties.milestones(res.trace, img)


@pytest.mark.parametrize("variant,sgx", IMMUNE)
def test_exhaustive_certifies_immune_designs(variant, sgx):
    img = build_runtime(variant)
    out = exhaustive_attacker(img, sgx)
    assert isinstance(out, NoneFound), variant
    assert out.stats.runs > 1000          # the space was really enumerated


@pytest.mark.parametrize("variant,sgx,toggles,classes", VULNERABLE)
def test_oracle_dominance(variant, sgx, toggles, classes):
    # wherever the scripted plan succeeds, the oracle finds a witness too
    img = build_runtime(variant, toggles=toggles)
    out = exhaustive_attacker(img, sgx, classes=classes)
    assert isinstance(out, Counterexample)


def test_budget_exhaustion_is_not_reported_safe():
    img = build_runtime("graphene_emulated")
    out = exhaustive_attacker(img, SGX2, budget=SearchBudget(max_runs=50))
    assert isinstance(out, BudgetExceeded)


def test_quota_oversized_section_reopens_the_attack():
    img = build_runtime("hw_irq_quota", toggles=Toggles(critical_pad=130))
    out = exhaustive_attacker(img, SGX2)
    assert isinstance(out, Counterexample)


def test_worker_fanout_matches_sequential():
    img = build_runtime("nssa_disabled")
    seq = exhaustive_attacker(img, SGX2, workers=1)
    par = exhaustive_attacker(img, SGX2, workers=2)
    assert isinstance(seq, NoneFound) and isinstance(par, NoneFound)
    assert seq.stats.to_dict() == par.stats.to_dict()

    img2 = build_runtime("sdk_style")
    seq2 = exhaustive_attacker(img2, SGX2, workers=1)
    par2 = exhaustive_attacker(img2, SGX2, workers=2)
    assert isinstance(seq2, Counterexample) and isinstance(par2, Counterexample)
    assert seq2.branch == par2.branch


# ---------------------------------------------------------------------------
# randomized stack base
# ---------------------------------------------------------------------------

def test_rates():
    assert exact_single_shot_rate() == 64 / 2048 == 0.03125
    mc = estimate_single_shot_rate(100000, seed=7)
    assert abs(mc - 0.03125) <= 0.002
    assert estimate_single_shot_rate(2000, seed=3, window=2048) == 1.0
    with pytest.raises(ValueError):
        estimate_single_shot_rate(0, seed=1)


def test_multi_round_degenerate_offset_zero():
    img = build_runtime("sdk_style")
    res = multi_round_aslr(img, SGX2, simulate=True)
    assert res.success and res.rounds_needed == 1


def test_single_round_budget_equals_single_shot_rate():
    hits = 0
    for off in range(1, 2049):
        img = build_runtime("sdk_style",
                            toggles=Toggles(aslr_stack_offset=off))
        res = multi_round_aslr(img, SGX2, max_rounds=1, simulate=False)
        hits += 0 if res.exhausted else 1
    assert hits / 2048 == exact_single_shot_rate()


def test_multi_round_concrete_corrupts_for_sampled_offsets():
    for off in (0, 7, 63, 64, 512, 1024, 2048):
        img = build_runtime("sdk_style",
                            toggles=Toggles(aslr_stack_offset=off))
        res = multi_round_aslr(img, SGX2, simulate=True)
        assert res.success and res.anchor_corrupted, off
        assert res.rounds_needed <= 32
