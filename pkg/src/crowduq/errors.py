"""Exception types shared across the package."""


class CrowdUQError(Exception):
    """Base class for all errors raised by this package."""


class BoundarySpecError(CrowdUQError):
    """Boundary segment specification is malformed or not face-aligned."""


class OverlappingBoundarySpec(BoundarySpecError):
    """Inflow and outflow segments intersect."""


class EmptyOutflow(CrowdUQError):
    """Grid has no outflow faces but is used for a flowthrough solve."""


class HypothesisViolation(CrowdUQError):
    """A parameter set violates one of the model hypotheses.

    Carries the short hypothesis label (e.g. ``"H4'"``) so callers can
    report which admissibility condition failed.
    """

    def __init__(self, label: str, message: str):
        self.label = label
        super().__init__(f"{message} [{label}]")


class GridMismatch(CrowdUQError):
    """Two parameter sets do not live on the same grid / time grid."""


class StepRestrictionViolated(CrowdUQError):
    """Requested time step exceeds the bound-preservation restriction."""


class NonConvergence(CrowdUQError):
    """A linear or fixed-point solve did not reach its tolerance."""


class NoContraction(CrowdUQError):
    """Fixed-point residuals stopped decreasing; the map does not contract."""


class BoundViolation(CrowdUQError):
    """A computed density left [0, 1] beyond tolerance (never repaired)."""


class TimeOffGrid(CrowdUQError):
    """Requested evaluation time does not coincide with a step time."""


class EmptyWindow(CrowdUQError):
    """Degenerate time window (t1 >= t2)."""


class DegeneratePerturbation(CrowdUQError):
    """Perturbation has zero parameter distance; no ratio can be formed."""


class ExplosionGuard(CrowdUQError):
    """Scenario tree would exceed the configured size limit."""


class NodeNotFound(CrowdUQError):
    """Unknown node id in a scenario tree."""


class EmptyDistribution(CrowdUQError):
    """Empirical distribution has no atoms."""


class InfeasibleWeights(CrowdUQError):
    """Transport marginals do not carry equal total mass."""


class StageMismatch(CrowdUQError):
    """Two scenario trees do not share the same stage structure."""


class ConfigError(CrowdUQError):
    """Experiment configuration is malformed."""
