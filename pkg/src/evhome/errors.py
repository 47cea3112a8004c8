"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input is outside the physical domain of an operation."""


class SingularityError(DomainError):
    """An operation would divide by a vanishing age or throughput."""


class ValidationError(ValueError):
    """A dataset or configuration file failed validation."""


class OracleGuardError(ValueError):
    """A brute-force enumeration request exceeds the tractability guard."""


class SimulationFault(RuntimeError):
    """The simulated system entered a physically impossible state."""
