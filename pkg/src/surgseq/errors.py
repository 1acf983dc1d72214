"""Exception types shared across the package."""


class SurgseqError(Exception):
    """Base class for all package errors."""


class TaxonomyError(SurgseqError):
    pass


class WindowingError(SurgseqError):
    pass


class FeatureError(SurgseqError):
    pass


class BayesNetError(SurgseqError):
    pass


class MarkovError(SurgseqError):
    pass


class CrfError(SurgseqError):
    pass


class RecognizerError(SurgseqError):
    pass


class EvalError(SurgseqError):
    pass


class GeneratorError(SurgseqError):
    pass


class ConfigError(SurgseqError):
    pass
