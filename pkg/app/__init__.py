"""resonet application."""

__version__ = "1.0.0"
__author__ = "resonet developers"
__description__ = "Resonance web, scattering map and transition chain toolkit for rotator x pendulum Hamiltonians"
