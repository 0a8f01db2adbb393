"""Exception types shared across the package.

Each operation's contract names the error it raises; keeping them all here
makes the mapping greppable and lets callers catch the base class.
"""


class SpkLabError(Exception):
    """Base class for all spklab errors."""


# -- tensor / kernel errors ------------------------------------------------

class ShapeMismatch(SpkLabError):
    pass


class EmptyInput(SpkLabError):
    pass


class ZeroVector(SpkLabError):
    pass


class NonPositiveTemperature(SpkLabError):
    pass


class NonFiniteValue(SpkLabError):
    pass


class NonFiniteLoss(NonFiniteValue):
    pass


class StepOutOfRange(SpkLabError):
    pass


# -- world generation ------------------------------------------------------

class InvalidConfig(SpkLabError):
    pass


class EmptyCluster(SpkLabError):
    pass


class InvalidRate(SpkLabError):
    pass


class InsufficientIdentities(SpkLabError):
    pass


class UnknownUtterance(SpkLabError):
    pass


class TruthUnavailable(SpkLabError):
    pass


# -- training / losses -----------------------------------------------------

class BatchLargerThanPopulation(SpkLabError):
    pass


class EmptyBatch(SpkLabError):
    pass


class NonDistribution(SpkLabError):
    pass


class InvalidLabel(SpkLabError):
    pass


# -- mixture fitting / thresholds ------------------------------------------

class NonPositiveVariance(SpkLabError):
    pass


class TooFewSamples(SpkLabError):
    pass


class DegenerateFit(SpkLabError):
    pass


class DegenerateMeans(SpkLabError):
    pass


# -- clustering ------------------------------------------------------------

class TooFewDistinctPoints(SpkLabError):
    pass


# -- metrics ---------------------------------------------------------------

class DegenerateTrials(SpkLabError):
    pass


class LengthMismatch(SpkLabError):
    pass


# -- pipeline artifacts ----------------------------------------------------

class MissingArtifact(SpkLabError):
    pass
