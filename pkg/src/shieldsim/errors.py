"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """Raised when a geometry, fault plan or campaign config is inconsistent."""


class AllocationError(ValueError):
    """Raised when a block does not fit in the modelled scratchpad/accumulator."""
