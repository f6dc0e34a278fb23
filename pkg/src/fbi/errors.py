"""Exception hierarchy for the fingerprinting toolkit."""


class FingerprintError(Exception):
    """Base class for all toolkit errors."""


class ParseError(FingerprintError):
    """A file row or config entry could not be parsed."""


class ConsistencyError(FingerprintError):
    """A prediction table violates its structural invariants."""


class ConfigError(FingerprintError):
    """Invalid protocol or CLI configuration."""


class InsufficientPool(FingerprintError):
    """A selection stratum is smaller than the requested share."""


class LengthMismatch(FingerprintError):
    """Surjected sequences do not align."""


class EmptyDelegateSet(FingerprintError):
    """Compound distance requested with no delegates."""


class EmptyInput(FingerprintError):
    """An aggregate over an empty list was requested."""


class InfeasibleAccuracies(FingerprintError):
    """No joint distribution is compatible with the given accuracies."""


class OutOfRegime(FingerprintError):
    """The closed-form distance bound only holds for A + B > 1."""


class OracleOutputInvalid(FingerprintError):
    """The black-box answer matches no candidate model."""


class BudgetExhausted(FingerprintError):
    """The query budget ran out before a verdict."""


class TooFewNegatives(FingerprintError):
    """Not enough negative pairs to calibrate a threshold."""


class DegenerateEvidence(FingerprintError):
    """All observed sequences are constant and carry no evidence."""


class AccuracyGateViolation(FingerprintError):
    """A generated variant loses more accuracy than the tolerance allows."""


class MissingGroundTruth(FingerprintError):
    """An accuracy computation needs ground truth that is absent."""
