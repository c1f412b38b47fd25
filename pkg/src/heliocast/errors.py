"""Exception types shared across the package."""


class HeliocastError(Exception):
    """Base class for all package errors."""


class ParseError(HeliocastError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GapError(HeliocastError, ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:20])
        more = f" (+{len(self.missing) - 20} more)" if len(self.missing) > 20 else ""
        super().__init__(f"timestamp gap: missing {shown}{more}")


class ValidationError(HeliocastError, ValueError):
    pass


class FormatError(HeliocastError, ValueError):
    pass


class AlignmentError(HeliocastError, ValueError):
    pass


class ParameterError(HeliocastError, ValueError):
    pass


class ShapeError(HeliocastError, ValueError):
    pass


class NumericError(HeliocastError, ArithmeticError):
    def __init__(self, message: str, layer: str | None = None):
        self.layer = layer
        if layer is not None:
            message = f"{layer}: {message}"
        super().__init__(message)


class ConfigError(HeliocastError, ValueError):
    pass
