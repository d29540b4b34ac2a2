"""Exception types raised by the library. Only the CLI turns these into exit codes."""


class HydraMixError(Exception):
    pass


class DimensionError(HydraMixError, ValueError):
    pass


class DomainError(HydraMixError, ValueError):
    pass


class ContractError(HydraMixError, RuntimeError):
    pass


class GraphError(HydraMixError, RuntimeError):
    pass


class ArgumentError(HydraMixError, ValueError):
    pass


class ConfigError(HydraMixError, ValueError):
    """Invalid configuration value; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ManifestError(ConfigError):
    pass


class NumericalError(HydraMixError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(HydraMixError, IOError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class DataIOError(HydraMixError, IOError):
    pass
