"""
Exception hierarchy shared by the rdmi package.
"""


class RdsimError(Exception):
    """Base class for every error raised by the simulation engine."""


class ScenarioError(RdsimError, ValueError):
    """Scenario document violates the schema or a scenario invariant."""


class DgmError(RdsimError):
    """Data generation cannot satisfy the requested schedule."""


class ManifestError(RdsimError, ValueError):
    """Run manifest is unusable (no scenarios, no models, unknown model)."""
