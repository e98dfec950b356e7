"""Scenario, trace, and report serialization.

Text-first, human-diffable, byte-stable: scenario files are JSON with a
fixed key set and documented defaults; traces are line-delimited records
(one host action or one machine event per line, each event line carrying a
running state digest); reports are JSON with sorted keys and no volatile
fields.  Replaying a trace file reproduces every digest or fails loudly at
the first divergent line.
"""

from __future__ import annotations

import hashlib
import json
from typing import Optional

from .harness import (
    Eenter, Eresume, FlipPerms, InjectAex, PrepareRegs, SeedPublic, Stop,
)
from .machine import EVENT_IDS, EVENT_NAMES, VECTOR_IDS, VECTOR_NAMES
from .properties import ALL_PROPERTIES, SAFETY_PROPERTIES
from .runtimes import VARIANTS

TOOL_VERSION = "aexlab 0.1.0"
TRACE_MAGIC = "# aexlab-trace v1"

ADVERSARY_MODES = ("benign", "benign_nested", "benign_critical", "scripted",
                   "exhaustive", "multi_round_aslr", "monte_carlo")


class ScenarioError(Exception):
    """Malformed scenario document; the message carries the offending key."""


_DEFAULT_BUDGETS = {"max_runs": 200000, "max_steps": 20000,
                    "boundary_cap": 160, "depth": 6}
_DEFAULT_TOGGLES = {"sgx1_valid_check_removed": False, "aslr_stack_offset": 0,
                    "alignment_required": 16, "critical_pad": 0,
                    "flag_strategy": None}
_DEFAULT_HW_EXT = {"allowed": 100, "window": 10000}

_SCENARIO_KEYS = {
    "variant", "sgx_version", "adversary", "seed", "properties", "budgets",
    "toggles", "hw_ext", "layout", "inject_classes", "sp_confinement_mode",
    "vector", "route", "max_rounds", "trials", "boundary",
}


def normalize_scenario(doc: dict) -> dict:
    """Validate and fill defaults; the result round-trips byte-identically
    through dumps/loads."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be an object")
    unknown = set(doc) - _SCENARIO_KEYS
    if unknown:
        raise ScenarioError(f"unknown keys: {sorted(unknown)}")
    variant = doc.get("variant")
    if variant not in VARIANTS:
        raise ScenarioError(f"unknown variant: {variant!r}")
    sgx = doc.get("sgx_version", 2)
    if sgx not in (1, 2):
        raise ScenarioError(f"sgx_version must be 1 or 2, got {sgx!r}")
    adversary = doc.get("adversary", "exhaustive")
    if adversary not in ADVERSARY_MODES:
        raise ScenarioError(f"unknown adversary mode: {adversary!r}")
    props = tuple(doc.get("properties") or
                  (SAFETY_PROPERTIES + ("functionality",)
                   if adversary.startswith("benign") else SAFETY_PROPERTIES))
    for p in props:
        if p not in ALL_PROPERTIES:
            raise ScenarioError(f"unknown property: {p!r}")
    budgets = dict(_DEFAULT_BUDGETS)
    for k, v in (doc.get("budgets") or {}).items():
        if k not in budgets:
            raise ScenarioError(f"unknown budget key: {k!r}")
        if not isinstance(v, int) or v <= 0:
            raise ScenarioError(f"budget {k} must be a positive integer")
        budgets[k] = v
    toggles = dict(_DEFAULT_TOGGLES)
    for k, v in (doc.get("toggles") or {}).items():
        if k not in toggles:
            raise ScenarioError(f"unknown toggle: {k!r}")
        toggles[k] = v
    hw_ext = dict(_DEFAULT_HW_EXT)
    for k, v in (doc.get("hw_ext") or {}).items():
        if k not in hw_ext:
            raise ScenarioError(f"unknown hw_ext key: {k!r}")
        hw_ext[k] = v
    from .runtimes import Layout
    layout = {}
    layout_fields = set(Layout.__dataclass_fields__)
    for k, v in (doc.get("layout") or {}).items():
        if k not in layout_fields:
            raise ScenarioError(f"unknown layout key: {k!r}")
        if not isinstance(v, int):
            raise ScenarioError(f"layout {k} must be an integer")
        layout[k] = v
    classes = tuple(doc.get("inject_classes") or
                    ("page_fault", "external_interrupt"))
    for c in classes:
        if c not in VECTOR_IDS:
            raise ScenarioError(f"unknown exception class: {c!r}")
    sp_mode = doc.get("sp_confinement_mode", "range")
    if sp_mode not in ("range", "strict"):
        raise ScenarioError(f"sp_confinement_mode must be range|strict")
    vector = doc.get("vector")
    if vector is not None and vector not in VECTOR_IDS:
        raise ScenarioError(f"unknown vector: {vector!r}")
    route = doc.get("route")
    if route not in (None, "private", "public"):
        raise ScenarioError("route must be private|public")
    return {
        "variant": variant,
        "sgx_version": sgx,
        "adversary": adversary,
        "seed": int(doc.get("seed", 0)),
        "properties": list(props),
        "budgets": budgets,
        "toggles": toggles,
        "hw_ext": hw_ext,
        "layout": layout,
        "inject_classes": list(classes),
        "sp_confinement_mode": sp_mode,
        "vector": vector,
        "route": route,
        "max_rounds": int(doc.get("max_rounds", 32)),
        "trials": int(doc.get("trials", 100000)),
        "boundary": doc.get("boundary"),
    }


def dumps_scenario(scenario: dict) -> str:
    return json.dumps(scenario, sort_keys=True, indent=2) + "\n"


def loads_scenario(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"line {e.lineno} column {e.colno}: {e.msg}")
    return normalize_scenario(doc)


def scenario_digest(scenario: dict) -> str:
    return hashlib.sha256(dumps_scenario(scenario).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Action lines
# ---------------------------------------------------------------------------

def _kv(pairs) -> str:
    return ",".join(f"{k}={v:#x}" for k, v in pairs)


def _parse_kv(text: str):
    if not text:
        return ()
    out = []
    for part in text.split(","):
        k, _, v = part.partition("=")
        out.append((k, int(v, 16)))
    return tuple(out)


def action_to_line(action) -> str:
    if isinstance(action, PrepareRegs):
        return f"A prep {_kv(action.regs)}"
    if isinstance(action, Eenter):
        regs = "-" if action.regs is None else (_kv(action.regs) or "=")
        aep = "-" if action.aep is None else f"{action.aep:#x}"
        return f"A eenter {action.cmd:#x} {regs} {aep}"
    if isinstance(action, Eresume):
        return "A eresume"
    if isinstance(action, InjectAex):
        return f"A inject {VECTOR_NAMES[action.vector]} {action.boundary}"
    if isinstance(action, FlipPerms):
        return f"A flip {action.page_base:#x} {action.perms}"
    if isinstance(action, SeedPublic):
        words = ",".join(f"{w:#x}" for w in action.words)
        return f"A seed {action.addr:#x} {words}"
    if isinstance(action, Stop):
        return "A stop"
    raise TypeError(f"unserializable action {action!r}")


def action_from_line(line: str):
    parts = line.split()
    if parts[0] != "A":
        raise ValueError(f"not an action line: {line!r}")
    kind = parts[1]
    if kind == "prep":
        return PrepareRegs(_parse_kv(parts[2] if len(parts) > 2 else ""))
    if kind == "eenter":
        cmd = int(parts[2], 16)
        regs = None if parts[3] == "-" else (
            () if parts[3] == "=" else _parse_kv(parts[3]))
        aep = None if parts[4] == "-" else int(parts[4], 16)
        return Eenter(cmd, regs, aep)
    if kind == "eresume":
        return Eresume()
    if kind == "inject":
        return InjectAex(VECTOR_IDS[parts[2]], int(parts[3]))
    if kind == "flip":
        return FlipPerms(int(parts[2], 16), int(parts[3]))
    if kind == "seed":
        words = tuple(int(w, 16) for w in parts[3].split(","))
        return SeedPublic(int(parts[2], 16), words)
    if kind == "stop":
        return Stop()
    raise ValueError(f"unknown action line: {line!r}")


def event_to_line(ev: tuple, digest: str) -> str:
    kind = EVENT_NAMES[ev[0]]
    rest = " ".join(f"{x:#x}" for x in ev[1:])
    return f"E {kind} {rest} {digest}"


def event_from_line(line: str):
    parts = line.split()
    if parts[0] != "E":
        raise ValueError(f"not an event line: {line!r}")
    kind = EVENT_IDS[parts[1]]
    fields = tuple(int(x, 16) for x in parts[2:-1])
    return (kind, *fields), parts[-1]


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

class TraceRecorder:
    """Interleaves action lines with per-event digest lines as a run
    unfolds; plug its hooks into run_plan."""

    def __init__(self, machine):
        self.machine = machine
        self.lines: list[str] = []
        self._seen = 0

    def on_action(self, idx: int, action) -> None:
        self.flush()
        self.lines.append(action_to_line(action))

    def flush(self) -> None:
        trace = self.machine.trace
        if len(trace) > self._seen:
            digest = self.machine.digest()
            for ev in trace[self._seen:]:
                self.lines.append(event_to_line(ev, digest))
            self._seen = len(trace)

    after_events = flush


def write_trace(path: str, scenario: dict, lines: list[str]) -> None:
    with open(path, "w") as fh:
        fh.write(TRACE_MAGIC + "\n")
        fh.write(f"# tool: {TOOL_VERSION}\n")
        fh.write(f"# scenario-digest: {scenario_digest(scenario)}\n")
        fh.write(f"# seed: {scenario['seed']}\n")
        fh.write(f"# lines: {len(lines)}\n")
        fh.write("# scenario: " + json.dumps(scenario, sort_keys=True) + "\n")
        for line in lines:
            fh.write(line + "\n")


class TraceFileError(Exception):
    pass


def read_trace(path: str) -> tuple[dict, int, list[str]]:
    """Returns (scenario, declared_line_count, lines)."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0] != TRACE_MAGIC:
        raise TraceFileError("missing trace magic")
    scenario = None
    declared = None
    header_digest = None
    body_start = 0
    for i, line in enumerate(raw):
        if line.startswith("# scenario: "):
            scenario = normalize_scenario(json.loads(line[len("# scenario: "):]))
        elif line.startswith("# lines: "):
            declared = int(line[len("# lines: "):])
        elif line.startswith("# scenario-digest: "):
            header_digest = line[len("# scenario-digest: "):].strip()
        if not line.startswith("#"):
            body_start = i
            break
    else:
        body_start = len(raw)
    if scenario is None or declared is None:
        raise TraceFileError("incomplete trace header")
    if header_digest != scenario_digest(scenario):
        raise TraceFileError("scenario digest does not match the header")
    return scenario, declared, raw[body_start:]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def render_report(scenario: dict, status: str, verdicts, milestones,
                  stats: dict, trace_file: Optional[str],
                  exit_code: int) -> dict:
    return {
        "tool": TOOL_VERSION,
        "scenario": scenario,
        "scenario_digest": scenario_digest(scenario),
        "status": status,
        "verdicts": [v.to_dict() for v in verdicts],
        "milestones": list(milestones),
        "stats": dict(sorted(stats.items())),
        "trace_file": trace_file,
        "exit_code": exit_code,
    }


def write_report(path: str, report: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2) + "\n")
