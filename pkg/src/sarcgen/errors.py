"""Exception hierarchy. Each class maps to one CLI exit code."""


class SarcgenError(Exception):
    exit_code = 1


class ConfigError(SarcgenError):
    exit_code = 3

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DataError(SarcgenError):
    exit_code = 4


class MalformedTaggingError(DataError):
    pass


class ScoreRangeError(DataError):
    pass


class ScorerUnavailableError(SarcgenError):
    exit_code = 5


class NumericError(SarcgenError, ArithmeticError):
    exit_code = 6


class ShapeError(SarcgenError, ValueError):
    exit_code = 6
