"""
Error taxonomy shared by every dsgforge module.
Input-shape problems also subclass ValueError so callers can treat them as bad input.
"""
from typing import Optional


class DsgForgeError(Exception):
    """Base class for all dsgforge errors."""


# --- Design-State Graph ---
class MalformedDocument(DsgForgeError, ValueError):
    """Text is not parseable as the DSG interchange format."""


class SchemaViolation(DsgForgeError, ValueError):
    """Document parsed but breaks the DSG schema (missing field, bad UUID, dangling edge...)."""


class UnknownNode(DsgForgeError, KeyError):
    """A node_id does not exist in the node map."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown node"


# --- LLM gateway ---
class TransportError(DsgForgeError):
    """HTTP failure after all transport retries."""


class ScriptMiss(DsgForgeError, LookupError):
    """The scripted backend has no canned reply for a (role, step, seed) key."""


class ContextOverflow(DsgForgeError):
    """A completion hit the completion-token cap (finish_reason=length)."""


class OutputValidationError(DsgForgeError, ValueError):
    """A single completion did not match the requested output schema."""


class SchemaExhausted(DsgForgeError):
    """Every structured-output attempt produced invalid output."""

    def __init__(self, message: str, last_error: Optional[Exception] = None, attempts: int = 0):
        super().__init__(message)
        self.last_error = last_error
        self.attempts = attempts


# --- Agents ---
class MissingContext(DsgForgeError, ValueError):
    """A prompt input declared by the role is absent from the context bundle."""


class DialogueAborted(DsgForgeError):
    """The requirements dialogue driver ran out of user turns."""


class SelectionOutOfRange(OutputValidationError):
    """A meta-review selected a proposal index that does not exist."""


class InvalidSelection(DsgForgeError):
    """Meta-review kept selecting an out-of-range proposal after all retries."""


class ToolUnavailable(DsgForgeError):
    """A research tool cannot be reached (offline mode or network failure)."""


# --- Workflow ---
class StorageError(DsgForgeError, OSError):
    """A checkpoint or run artifact could not be written."""


# --- Metrics ---
class InterpreterMissing(DsgForgeError):
    """The configured interpreter for the executability check cannot be resolved."""


class NoSnapshots(DsgForgeError, ValueError):
    """A run record carries no snapshots."""


class NoFinalDsg(DsgForgeError, ValueError):
    """A run has no snapshot carrying a Design-State Graph."""


# --- Harness ---
class EmptyAxis(DsgForgeError, ValueError):
    """An experiment-matrix axis is empty."""


class DuplicateAxisValue(DsgForgeError, ValueError):
    """An experiment-matrix axis lists the same value twice."""


class RunDirectoryExists(DsgForgeError, FileExistsError):
    """A run directory is already populated and overwrite was not requested."""
