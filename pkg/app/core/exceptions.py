"""
Domain errors raised across the simulator.

Numeric kernels raise the specific subclass; service entry points log and
re-raise with the failing component named in the message.
"""


class FedConError(Exception):
    """Base class for every simulator error."""


class NonFinite(FedConError, ValueError):
    """A matrix or vector contains NaN or infinity."""


class RankDeficient(FedConError, ValueError):
    """Vectors do not span the ambient space."""


class NoConvergence(FedConError, RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


class TooLarge(FedConError, ValueError):
    """An exhaustive routine was asked to handle an instance beyond its bounds."""


class Singular(FedConError, ValueError):
    """A linear system matrix is (numerically) singular."""


class UnknownArm(FedConError, KeyError):
    """An arm id is not in the relevant arm set."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown arm"


class UnknownKeyTerm(FedConError, KeyError):
    """A key-term id is not in the key-term set."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown key term"


class EmptyKeyTermSet(FedConError, ValueError):
    """An operation needs key terms but the set is empty."""


class BadShape(FedConError, ValueError):
    """Array or instance dimensions are inconsistent with the request."""


class DimMismatch(FedConError, ValueError):
    """Messages or states disagree on the feature dimension."""


class WrongAlgorithm(FedConError, ValueError):
    """A meter was applied to a log produced by a different algorithm."""


class ConfigError(FedConError, ValueError):
    """An experiment configuration is invalid."""


class ExperimentError(FedConError, RuntimeError):
    """A simulation run failed."""
