"""Exception hierarchy for elastoscan."""


class ElastoscanError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""
    exit_code = 1


class ConfigError(ElastoscanError):
    exit_code = 4


class SchemaError(ElastoscanError):
    """Malformed input file; carries the offending line number when known."""
    exit_code = 2

    def __init__(self, message: str, line: int = None, path: str = None):
        self.line = line
        self.path = path
        where = ''
        if path:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class InvalidGeometryError(ElastoscanError):
    pass


class EmptyPatchError(ElastoscanError):
    pass


class InvalidMaterialError(ElastoscanError):
    pass


class ResonanceError(ElastoscanError):
    """(K - omega^2 M) is singular or too badly conditioned at omega."""
    exit_code = 3

    def __init__(self, omega: float, detail: str = ''):
        self.omega = omega
        message = f"omega={omega:.6g} rad/s is at or near a resonance"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DimensionError(ElastoscanError):
    pass


class AlignmentError(ElastoscanError):
    pass


class InvalidMatrixError(ElastoscanError):
    pass


class NoGapError(ElastoscanError):
    pass


class InsufficientDataError(ElastoscanError):
    pass


class CoverageError(ElastoscanError):
    pass


class ContainmentError(ElastoscanError):
    pass


class OverlapError(ElastoscanError):
    pass


class BandRefusal(ElastoscanError):
    """Frequency outside the measurement bands without --force."""
    exit_code = 5
