"""Exception hierarchy for the runtime."""


class PgasError(Exception):
    """Base class for all runtime errors."""


class ConfigError(PgasError):
    """Invalid or inconsistent configuration."""


class HeapExhausted(PgasError):
    """A collective allocation did not fit in the symmetric heap."""


class ContractViolation(PgasError):
    """Caller passed an address or argument outside the operation's contract."""


class SendAfterShutdown(PgasError):
    """A ring send was attempted after the ring was shut down."""


class CompletionError(PgasError):
    """A proxied operation completed with an error status."""


class PendingOperationsError(PgasError):
    """Finalize was called while operations were still in flight."""


class GeometryError(PgasError):
    """Internode world geometry disagrees between the two nodes."""


class LinkError(PgasError):
    """The internode byte-stream link failed."""
