"""Exception hierarchy.

Every error carries a ``category`` used by the command line to pick an exit
code: ``input`` for bad files or arguments, ``runtime`` for failures during
computation.
"""


class ClipItError(Exception):
    category = "runtime"


class InputError(ClipItError):
    category = "input"


# numeric core
class ZeroVector(ClipItError, ValueError):
    pass


class DimensionMismatch(ClipItError, ValueError):
    pass


class ShapeMismatch(ClipItError, ValueError):
    pass


class NonFiniteInput(ClipItError, ValueError):
    pass


class InvalidDistribution(ClipItError, ValueError):
    pass


class IndexOutOfRange(ClipItError, IndexError):
    pass


class NonFiniteLoss(ClipItError, FloatingPointError):
    pass


# file formats and containers
class BadMagic(InputError):
    pass


class UnsupportedVersion(InputError):
    pass


class TruncatedFile(InputError):
    pass


class LabelLengthMismatch(InputError):
    pass


class DuplicateId(InputError):
    pass


class MalformedLine(InputError):
    def __init__(self, line_number, reason=""):
        self.line_number = line_number
        msg = f"line {line_number}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptyText(InputError):
    pass


class EmptyFilterResult(InputError):
    pass


class RankExceedsCorpus(InputError):
    pass


class InstanceMismatch(InputError):
    pass


class ConfigInvalid(InputError):
    pass


# training / evaluation
class EmptyDataset(InputError):
    pass


class EmptyInput(InputError):
    pass


class LengthMismatch(InputError):
    pass


class MissingTextPredictions(InputError):
    pass


class InvalidPValue(InputError):
    pass
