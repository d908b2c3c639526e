"""Exception and warning types raised across the package."""


class RegistrationError(Exception):
    """Base class for all errors raised by dscreg."""


class DegenerateConfiguration(RegistrationError, ValueError):
    """A rigid fit is ill-posed: too few weighted points, or collinear/coincident ones."""


class SumWeightsZero(DegenerateConfiguration):
    pass


class AllHypothesesDegenerate(RegistrationError):
    pass


class TooFewCorrespondences(RegistrationError, ValueError):
    pass


class AllSamplesDegenerate(RegistrationError):
    pass


class NonFiniteLoss(RegistrationError, FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class ParseError(RegistrationError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class UnsupportedFormat(ParseError):
    pass


class InconsistentColumns(ParseError):
    pass


class WeightFileError(RegistrationError, ValueError):
    """A serialized network does not match the expected parameter layout."""


class ZeroNormFeatureWarning(UserWarning):
    """A feature row had (near) zero norm and was normalized to the zero vector."""
