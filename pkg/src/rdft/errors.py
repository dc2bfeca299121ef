"""Exception hierarchy. Each class carries a ``category`` used by the CLI."""


class RdftError(Exception):
    category = "error"


class ShapeError(RdftError, ValueError):
    category = "shape"


class ContractError(RdftError, ValueError):
    category = "contract"


class ConfigError(RdftError, ValueError):
    category = "config"


class UnsupportedConfigurationError(ConfigError):
    category = "unsupported-configuration"


class SamplingError(RdftError, ValueError):
    category = "sampling"


class FormatError(RdftError, ValueError):
    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(FormatError):
    category = "unsupported-format"


class IngestionError(RdftError, OSError):
    category = "ingestion"


class InputTooShortError(RdftError, ValueError):
    category = "input-too-short"
