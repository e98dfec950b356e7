import pytest

from aexlab.isa import assemble
from aexlab.machine import (
    MODE_ENCLAVE, PERM_R, PERM_W, PERM_X, PRIVATE, PUBLIC, RIP, Machine,
    Memory, Page, TCS,
)
from aexlab.runtimes import EnclaveImage, Layout, Toggles

CODE = 0x1000
DATA = 0x20000
PUB = 0x40000


def make_raw_machine(source: str, symbols=None, nssa: int = 2,
                     data_secret=()):
    """A bare machine around a hand-written program: one code page, one
    private data page (doubles as stack), one public page.  The machine is
    already inside the enclave at the first instruction."""
    program = assemble(source, CODE, dict(symbols or {}, data=DATA, pub=PUB))
    pages = [
        Page(CODE, 0x1000, PRIVATE, PERM_R | PERM_X),
        Page(DATA, 0x1000, PRIVATE, PERM_R | PERM_W),
        Page(PUB, 0x1000, PUBLIC, PERM_R | PERM_W),
    ]
    mem = Memory(pages)
    for addr, value in dict(data_secret).items():
        mem.write(addr, value, True)
    tcs = TCS(entry_point=CODE, nssa=nssa, ssa_base=DATA + 0xF00)
    m = Machine(mem, tcs)
    m.mode = MODE_ENCLAVE
    m.tcs.busy = True
    m.regs[RIP] = CODE
    m.aep = PUB
    return m, program


def make_raw_image(program, stack_base=DATA + 0xF00) -> EnclaveImage:
    """Wrap a hand-written program in just enough image metadata for the
    detectors."""
    return EnclaveImage(
        variant="custom", layout=Layout(), toggles=Toggles(),
        program=program, nssa=2, auto_mask=False, auto_atomic=False,
        stack_base=stack_base,
        trusted_stack_ranges=((DATA, DATA + 0x1000),),
        sp_windows=(), crit_ranges=(),
    )


@pytest.fixture(scope="session")
def sdk_image():
    from aexlab.runtimes import build_runtime
    return build_runtime("sdk_style")
