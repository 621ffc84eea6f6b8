"""Services module: the numerical core."""

__all__ = [
    "expr",
    "hamiltonian",
    "separatrix",
    "resonance",
    "averaging",
    "melnikov",
    "scattering",
    "simulate",
    "fixtures",
]
