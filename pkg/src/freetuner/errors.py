"""Exception types raised across the package."""


class FreeTunerError(Exception):
    pass


class InvalidArgument(FreeTunerError, ValueError):
    pass


class PreconditionError(FreeTunerError):
    pass


class UnknownTokenError(FreeTunerError, KeyError):
    def __init__(self, word):
        self.word = word
        super().__init__(f"unknown token: {word!r}")

    def __str__(self):
        return f"unknown token: {self.word!r}"


class MissingSubjectTokenError(FreeTunerError):
    def __init__(self, word):
        self.word = word
        super().__init__(f"subject word {word!r} not present in composition prompt")


class DegenerateTimestepError(FreeTunerError):
    pass


class TrainingDivergedError(FreeTunerError):
    pass


class OptimizationFailure(FreeTunerError):
    def __init__(self, t, message="non-finite null-text loss"):
        self.t = t
        super().__init__(f"{message} at t={t}")


class GuidanceFailure(FreeTunerError):
    def __init__(self, kind, t):
        self.kind = kind
        self.t = t
        super().__init__(f"non-finite {kind} guidance gradient at t={t}")
