"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameter combination."""


class RoutingError(KeyError):
    """A language id has no registered expert in the adapter bank."""


class DependencyError(RuntimeError):
    """A required upstream artifact (e.g. base checkpoint) is missing."""


class CompatibilityError(ValueError):
    """Checkpoint family cannot serve the requested decoding strategy."""


class CorpusError(ValueError):
    """Malformed or inconsistent corpus / manifest."""


class MetricsError(ValueError):
    pass


class DecodeError(RuntimeError):
    pass
