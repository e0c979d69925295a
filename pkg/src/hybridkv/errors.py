class HybridKVError(Exception):
    """Base class for errors raised by hybridkv."""


class TraceFormatError(HybridKVError, ValueError):
    """A trace file or in-memory trace violates the format or its invariants."""


class InfeasibleSpecError(HybridKVError, ValueError):
    """The synthetic trace generator cannot satisfy the requested GenSpec."""


class BudgetError(HybridKVError, ValueError):
    """A budget configuration violates an allocation constraint."""
