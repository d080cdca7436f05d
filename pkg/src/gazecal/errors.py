"""Exception types shared across the package."""


class GazecalError(Exception):
    pass


class SchemaError(GazecalError, ValueError):
    """Input file does not match the session schema."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class IntegrityError(GazecalError, ValueError):
    """Data parsed fine but violates an invariant (e.g. non-monotone time)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class ConfigError(GazecalError, ValueError):
    pass


class StateError(GazecalError, RuntimeError):
    pass


class TrainingError(GazecalError, RuntimeError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} at epoch {epoch}"
        super().__init__(message)
