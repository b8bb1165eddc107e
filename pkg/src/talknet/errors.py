class TalkNetError(Exception):
    pass


class InvalidArgumentError(TalkNetError, ValueError):
    pass


class InvalidInputError(TalkNetError, ValueError):
    pass


class OutOfVocabularyError(InvalidArgumentError):
    pass


class DegenerateBatchError(TalkNetError, ValueError):
    pass


class UnrecoverableAlignmentError(TalkNetError):
    """Not enough blank frames to give every character at least one frame."""


class AlignmentConsistencyError(TalkNetError, AssertionError):
    pass


class ManifestError(TalkNetError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CheckpointError(TalkNetError, ValueError):
    pass


class TrainingDivergedError(TalkNetError, RuntimeError):
    pass
