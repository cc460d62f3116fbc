# src/errors.py

class DcpLabError(Exception):
    """Base class for every error raised by the lab."""


class ShapeError(DcpLabError, ValueError):
    """Tensor dimensions do not line up. The message names the shapes involved."""


class ContractError(DcpLabError, RuntimeError):
    """A caller broke a function's contract (wrong state, wrong argument kind)."""


class InputError(DcpLabError, ValueError):
    """A data value is outside what the operation accepts."""


class ConfigError(DcpLabError, ValueError):
    """Configuration is invalid. Messages from config files carry a line number."""
