"""Exception hierarchy for the urbanmas pipeline.

Every operational failure raised by this package derives from
:class:`UrbanMasError`, so callers can catch one type at pipeline
boundaries. Invariant violations on domain types raise plain
``ValueError`` at construction time instead.
"""


class UrbanMasError(Exception):
    """Base class for all operational errors raised by urbanmas."""


class ConfigError(UrbanMasError):
    """Invalid or inconsistent run configuration."""


# --- chat backend ---------------------------------------------------------

class BackendError(UrbanMasError):
    """Base class for chat-backend failures."""


class AuthenticationError(BackendError):
    """The live endpoint rejected our credentials."""


class TransportExhaustedError(BackendError):
    """All retry attempts against the live endpoint failed."""


class ReplayMissError(BackendError):
    """The cassette holds no entry for the request fingerprint."""


# --- geo ingestion --------------------------------------------------------

class GeoError(UrbanMasError):
    """Base class for geo-data ingestion failures."""


class UpstreamUnavailableError(GeoError):
    """A geo upstream (geocoder, POI, street-view) could not be reached."""


class OfflineMissError(GeoError):
    """Offline mode requested data that is not in the cache."""


class EnrichmentError(GeoError):
    """Every upstream failed while enriching a location."""


# --- factor guidance ------------------------------------------------------

class GuidanceError(UrbanMasError):
    """Base class for predictive-factor guidance failures."""


class DegenerateReportError(GuidanceError):
    """The research step kept producing reports below the minimum length."""


class InvalidFactorSetError(GuidanceError):
    """The summary step never produced a valid six-factor set."""


# --- extraction / reliability --------------------------------------------

class ExtractionError(UrbanMasError):
    """Base class for urban-information extraction failures."""


class ExtractionParseError(ExtractionError):
    """A variant response stayed unparseable after the re-ask."""


class FieldKeyMismatchError(UrbanMasError):
    """Two records being compared do not share the same field keys."""


class RefinerError(ExtractionError):
    """The refiner call for a named field failed."""


# --- inference ------------------------------------------------------------

class InferenceError(UrbanMasError):
    """Base class for prediction-inference failures."""


class SchemaFailureError(InferenceError):
    """The model never produced the required output schema."""


class MissingRecordsError(InferenceError):
    """Inference was invoked without the four dimension/level records."""


# --- evaluation -----------------------------------------------------------

class EvaluationError(UrbanMasError):
    """Base class for evaluation failures."""


class AlignmentError(EvaluationError):
    """Prediction and ground-truth ids do not line up."""
