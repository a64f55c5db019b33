"""Exception types shared across the package."""

from __future__ import annotations


class AtcError(Exception):
    """Base class for all package errors."""


class AmbiguousPath(AtcError):
    pass


class ParseError(AtcError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InvariantError(AtcError):
    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class EmptyScenario(AtcError):
    pass


class MissingAction(AtcError):
    def __init__(self, flight_id: str):
        self.flight_id = flight_id
        super().__init__(f"missing action for active agent {flight_id!r}")


class UnknownAgent(AtcError):
    def __init__(self, flight_id: str):
        self.flight_id = flight_id
        super().__init__(f"unknown or inactive agent {flight_id!r}")


class DimensionMismatch(AtcError):
    pass


class DegenerateInput(AtcError):
    pass


class EmptyAction(AtcError):
    def __init__(self, action: int):
        self.action = action
        super().__init__(f"no transitions recorded for action {action}")


class SingularEvaluation(AtcError):
    pass


class NonFiniteLoss(AtcError):
    pass


class UpdateRejected(AtcError):
    pass


class FeatureLayoutMismatch(AtcError):
    pass


class CloneUnsupported(AtcError):
    pass


class MissingPrerequisite(AtcError):
    def __init__(self, what: str):
        self.what = what
        super().__init__(f"missing prerequisite: {what}")


class ProtocolViolation(AtcError):
    pass


class WireTimeout(AtcError):
    pass


class ConfigError(AtcError):
    pass
