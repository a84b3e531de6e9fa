"""Exception and warning types raised across the package."""


class SrSlamError(Exception):
    """Base class for all package errors."""


class AxisAmbiguous(SrSlamError):
    pass


class BehindCamera(SrSlamError):
    pass


class NoFrames(SrSlamError):
    pass


class InsufficientMatches(SrSlamError):
    pass


class EmptyInput(SrSlamError):
    pass


class TrackingLost(SrSlamError):
    pass


class NoReferences(SrSlamError):
    pass


class ColdStart(SrSlamError):
    pass


class Degenerate(SrSlamError):
    pass


class ParseError(SrSlamError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptySequence(SrSlamError):
    pass


class DegenerateAlignment(SrSlamError):
    pass


class InsufficientOverlap(SrSlamError):
    pass


class InvalidBaseline(SrSlamError):
    pass


class ConfigError(SrSlamError):
    pass


class SrSlamWarning(UserWarning):
    pass


class NoTracksWarning(SrSlamWarning):
    pass


class FewTracksWarning(SrSlamWarning):
    pass


class ClampWarning(SrSlamWarning):
    pass
