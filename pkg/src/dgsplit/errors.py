"""Exception types shared across the package."""


class DgSplitError(Exception):
    """Base class for all package errors."""


class MeshError(DgSplitError):
    """Invalid mesh input or topology."""


class MshParseError(MeshError):
    """Malformed MSH file; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class UnsupportedElementError(MeshError):
    """MSH file contains 2D elements other than triangles."""


class LayoutError(DgSplitError):
    """Subdomain layout inconsistency."""


class SpaceMismatchError(DgSplitError):
    """Fields or operators built on incompatible spaces/cell sets."""


class DomainError(DgSplitError):
    """Point evaluation outside the requested cell."""


class SolverError(DgSplitError):
    """Linear solver failure (non-convergence or breakdown)."""


class IndefiniteMatrixError(SolverError):
    """CG breakdown: search direction with non-positive curvature."""


class SingularBlockError(SolverError):
    """Singular diagonal block in a block preconditioner."""


class SingularMassError(DgSplitError):
    """Zero-area cell makes the mass matrix singular."""


class CoercivityError(DgSplitError):
    """Energy form returned a significantly negative value (penalty too small)."""


class InstabilityError(DgSplitError):
    """Explicit time step blew up (CFL violation signal)."""


class ProtocolError(DgSplitError):
    """Exchange payload mismatch between two subdomains."""


class DeadlockTimeoutError(ProtocolError):
    """A worker waited too long for a scheduled message."""


class ConfigError(DgSplitError):
    """Invalid run configuration; message names the offending field."""
