"""Exception types shared across the package."""


class MeaningCapError(Exception):
    """Base class for input and configuration problems."""


class FormatError(MeaningCapError, ValueError):
    """A file on disk does not match its declared format."""


class ConfigurationError(MeaningCapError, ValueError):
    pass


class ShapeError(MeaningCapError, ValueError):
    pass


class VocabularyError(MeaningCapError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "vocabulary error"


class InputError(MeaningCapError, ValueError):
    pass
