class EbikeAgentsError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(EbikeAgentsError):
    """Missing or inconsistent configuration (credentials, endpoints, rule files)."""


class SchemaError(EbikeAgentsError):
    """Input file does not follow the documented column contract."""


class TransportError(EbikeAgentsError):
    """HTTP calls to the completion endpoint failed after all retries."""

    def __init__(self, message, status=None, attempts=0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class ProtocolError(EbikeAgentsError):
    """The completion endpoint answered with a body we cannot interpret."""


class ExtractionError(EbikeAgentsError):
    """An agent could not produce a usable answer for one record."""


class RecordExcluded(EbikeAgentsError, ValueError):
    """A record cannot be coded into a predictor vector; carries the reason."""


class IdentifiabilityError(EbikeAgentsError, ValueError):
    """Model parameters cannot be identified from the supplied data."""
