"""Exception types shared across the package.

Every error carries a stable ``kind`` string so the CLI can report it as a
single machine-parsable line.
"""


class RamError(Exception):
    kind = "RamError"
    exit_code = 1


class ShapeMismatch(RamError, ValueError):
    kind = "ShapeMismatch"


class NonFiniteValue(RamError, FloatingPointError):
    kind = "NonFiniteValue"


class NotScalarRoot(RamError, ValueError):
    kind = "NotScalarRoot"


class UnrecordedNode(RamError, ValueError):
    kind = "UnrecordedNode"


class OutOfRangeStep(RamError, ValueError):
    kind = "OutOfRangeStep"


class TooSmall(RamError, ValueError):
    kind = "TooSmall"


class NonPositiveSigma(RamError, ValueError):
    kind = "NonPositiveSigma"


class EvenKernel(RamError, ValueError):
    kind = "EvenKernel"


class QualityOutOfRange(RamError, ValueError):
    kind = "QualityOutOfRange"


class BadSpec(RamError, ValueError):
    kind = "BadSpec"


class PatchNotDividing(RamError, ValueError):
    kind = "PatchNotDividing"


class EmptyMaskedSet(RamError, ValueError):
    kind = "EmptyMaskedSet"


class BadConfig(RamError, ValueError):
    kind = "BadConfig"
    exit_code = 3


class UnknownLayer(RamError, KeyError):
    kind = "UnknownLayer"

    def __str__(self):
        return Exception.__str__(self)


class BadMagic(RamError):
    kind = "BadMagic"


class VersionMismatch(RamError):
    kind = "VersionMismatch"


class CorruptPayload(RamError):
    kind = "CorruptPayload"


class NonScalarF(RamError, ValueError):
    kind = "NonScalarF"


class NonFiniteAccumulation(RamError, FloatingPointError):
    kind = "NonFiniteAccumulation"


class EmptySuite(RamError, ValueError):
    kind = "EmptySuite"


class DivergedLoss(RamError, FloatingPointError):
    kind = "DivergedLoss"


class EmptySelection(RamError, ValueError):
    kind = "EmptySelection"


class BadGrid(RamError, ValueError):
    kind = "BadGrid"


class ConfigSyntaxError(RamError, ValueError):
    kind = "SyntaxError"
    exit_code = 3

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownKey(BadConfig):
    kind = "UnknownKey"


class BadValue(BadConfig):
    kind = "BadValue"


class ArtifactMissing(RamError, FileNotFoundError):
    kind = "ArtifactMissing"
    exit_code = 2

    def __init__(self, path, what="artifact"):
        super().__init__(f"missing {what}: {path}")
        self.path = str(path)

    def __str__(self):
        return self.args[0]
