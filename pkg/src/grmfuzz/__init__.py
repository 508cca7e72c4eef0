"""Two-stage processor fuzzing: a token policy refined first for validity
against a golden ISA interpreter, then for coverage against an instrumented
DUT simulator, with differential trace comparison."""

__version__ = "0.1.0"
