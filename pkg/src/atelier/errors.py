"""Exception types shared across the workbench.

Every failure mode a caller is expected to handle gets its own class so
tests and supervisors can match on type rather than message text.
"""

from __future__ import annotations


class AtelierError(Exception):
    """Base class for all workbench errors."""


# --- workspace ---------------------------------------------------------


class InvalidPath(AtelierError):
    """Path is empty, absolute, or contains '..' segments."""


class VersionConflict(AtelierError):
    """expected_version did not match the current latest version."""

    def __init__(self, path: str, expected: int, actual: int):
        super().__init__(f"{path}: expected version {expected}, latest is {actual}")
        self.path = path
        self.expected = expected
        self.actual = actual


class NotFound(AtelierError):
    """Path has never been written."""


class VersionOutOfRange(AtelierError):
    """Requested version exceeds the latest version for the path."""


# --- bus ----------------------------------------------------------------


class UnknownRecipient(AtelierError):
    pass


class UnknownSender(AtelierError):
    pass


class RoutingViolation(AtelierError):
    """Message edge is neither parent/child nor an ancestor escalation."""


# --- model backends -----------------------------------------------------


class BackendTimeout(AtelierError):
    pass


class BackendUnavailable(AtelierError):
    """Wire backend exhausted its retries."""


class ScriptMismatch(AtelierError):
    """Strict scripted backend has no entry matching the request."""


class ScriptExhausted(AtelierError):
    """All entries matching the request have already been consumed."""


class FixtureParseError(AtelierError):
    pass


class DisallowedTool(AtelierError):
    """Model named a tool outside the agent's allowlist."""


class UnparseableAction(AtelierError):
    """Model output could not be mapped to a valid action."""


# --- tools --------------------------------------------------------------


class RuntimeUnavailable(AtelierError):
    pass


class SandboxSetupFailure(AtelierError):
    pass


class ProviderUnavailable(AtelierError):
    pass


class QueryNotInFixture(AtelierError):
    pass


class FetchDenied(AtelierError):
    pass


class FetchFailed(AtelierError):
    pass


# --- agents -------------------------------------------------------------


class SpawnDenied(AtelierError):
    pass


class InvalidSpec(AtelierError):
    pass


class UnknownAgent(AtelierError):
    pass


# --- review -------------------------------------------------------------


class SessionClosed(AtelierError):
    pass


class NotStalled(AtelierError):
    pass


class ReportNotFound(AtelierError):
    pass


# --- report -------------------------------------------------------------


class UnknownBlock(AtelierError):
    pass


class DanglingAnchor(AtelierError):
    pass


class BadLocator(AtelierError):
    pass


# --- engine -------------------------------------------------------------


class MalformedProposal(AtelierError):
    pass


class NotUser(AtelierError):
    pass


class NoGoalsApproved(AtelierError):
    pass


class GoalNotApproved(AtelierError):
    pass


class GateViolation(AtelierError):
    pass


class NoAnswer(AtelierError):
    pass


# --- api ----------------------------------------------------------------


class BindFailure(AtelierError):
    pass


class ConfigError(AtelierError):
    pass
