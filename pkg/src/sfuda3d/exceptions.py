"""Exception hierarchy shared by all subsystems.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3 and numerical failures (NaN/Inf) with 4.
"""


class Sfuda3dError(Exception):
    """Base class for all package errors."""


class ConfigError(Sfuda3dError, ValueError):
    pass


class ParameterError(Sfuda3dError, ValueError):
    """An argument is outside its admissible range."""


class DimensionError(ParameterError):
    """Array or tensor shapes are incompatible."""


class LabelError(ParameterError):
    """A class id is outside ``{0..C-1}``."""


class ContractError(Sfuda3dError, RuntimeError):
    """An API was used in violation of its calling contract."""


class NumericalError(Sfuda3dError, FloatingPointError):
    """A non-finite value appeared in a computation."""


class DataError(Sfuda3dError):
    """A dataset, manifest or volume is unusable."""


class EmptyForegroundError(DataError):
    pass


class FormatError(DataError):
    """A binary file has a malformed header or payload."""


class ChecksumError(FormatError):
    pass


class ClassAbsentError(Sfuda3dError, KeyError):
    pass


class SamplingError(Sfuda3dError, RuntimeError):
    pass


class LibraryCorruptionError(Sfuda3dError):
    pass
