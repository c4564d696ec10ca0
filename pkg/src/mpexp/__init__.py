"""Mixed-precision exponential integration: reduced-precision emulation,
scheduled-precision Krylov evaluation of phi-function combinations, and the
exponential Rosenbrock-Euler family."""

__version__ = "0.1.0"
