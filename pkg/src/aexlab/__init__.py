"""Deterministic simulator and bounded checker for the enclave-OS
asynchronous exception interface: abstract hardware model, runtime-variant
images, adversarial host, trace detectors, and a scenario explorer."""

from .machine import Machine, SGX1, SGX2
from .runtimes import (
    EnclaveImage, Layout, Toggles, VARIANTS, build_machine, build_runtime,
)

__all__ = [
    "Machine", "SGX1", "SGX2", "EnclaveImage", "Layout", "Toggles",
    "VARIANTS", "build_machine", "build_runtime",
]

__version__ = "0.1.0"
