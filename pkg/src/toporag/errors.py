"""Exception hierarchy shared across the toolkit.

Every error that callers are expected to catch derives from ToporagError.
Constructor arguments that identify the offending entity (device name,
case id, ...) are kept as attributes so callers can report them without
string parsing.
"""

from __future__ import annotations


class ToporagError(Exception):
    """Base class for all toolkit errors."""


# --- topology parsing / splits ---


class MalformedJson(ToporagError):
    pass


class UnknownLinkEndpoint(ToporagError):
    def __init__(self, device: str):
        super().__init__(f"link endpoint references unknown device {device!r}")
        self.device = device


class DuplicateInterface(ToporagError):
    def __init__(self, device: str, iface: str):
        super().__init__(f"interface {iface!r} declared twice on device {device!r}")
        self.device = device
        self.iface = iface


class InfeasibleSizes(ToporagError):
    pass


# --- encoder / trainer ---


class EmptyGraph(ToporagError):
    pass


class ZeroVector(ToporagError):
    pass


class NonPositiveTau(ToporagError):
    pass


class DegenerateBatch(ToporagError):
    pass


class EmptyCorpus(ToporagError):
    pass


# --- retrieval ---


class ParseFailure(ToporagError):
    def __init__(self, case_id: str, reason: str):
        super().__init__(f"case {case_id!r} failed to parse: {reason}")
        self.case_id = case_id


class EncodeFailure(ToporagError):
    def __init__(self, case_id: str, reason: str):
        super().__init__(f"case {case_id!r} failed to encode: {reason}")
        self.case_id = case_id


class MissingDriver(ToporagError):
    def __init__(self, case_id: str, path: str):
        super().__init__(f"case {case_id!r} has no readable driver at {path}")
        self.case_id = case_id


class EmptyIndex(ToporagError):
    pass


class FingerprintMismatch(ToporagError):
    pass


class MissingKnowledgeFile(ToporagError):
    pass


class UnknownReference(ToporagError):
    pass


# --- budget ---


class BadCalibration(ToporagError):
    pass


# --- decoding ---


class CursorOutOfRange(ToporagError):
    pass


class EmptyPermittedSet(ToporagError):
    pass


class EmptyConstraint(ToporagError):
    pass


class TokenCapExceeded(ToporagError):
    pass


# --- verify ---


class CalledOnPass(ToporagError):
    pass


class EmptyTrace(ToporagError):
    pass


# --- agents ---


class ContractViolation(ToporagError):
    pass


class BackendError(ToporagError):
    pass


class AllReplicasFailed(ToporagError):
    pass


# --- evalkit ---


class EmptyRecords(ToporagError):
    pass
