"""Shared exception types."""


class DimensionError(ValueError):
    """Array shapes handed to an operation do not line up."""


class ContractViolation(RuntimeError):
    """A documented precondition was broken by the caller."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class BankFormatError(ValueError):
    """A feature-bank file failed magic, version, or checksum validation."""


class TemplateError(ValueError):
    """A prompt template is missing a required slot."""
