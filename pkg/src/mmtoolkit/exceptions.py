''' Errors raised by mmtoolkit. Every error derives from ValueError so that callers can treat bad
input uniformly, and from MmtError so that the command line can tell domain failures apart from
usage mistakes.
'''


class MmtError(ValueError):
    ''' Base class for all domain errors raised by this package '''


class DomainError(MmtError):
    ''' A value is outside of its documented range '''


class LengthError(DomainError):
    ''' A sequence is longer than the model accepts '''


class OutOfRangeError(DomainError):
    ''' A note starts after the last encodable beat '''


class UndefinedMetricError(DomainError):
    ''' A metric is not defined for the given score '''


class EmptyScoreError(MmtError):
    ''' A MIDI file contains no usable notes '''


class MidiParseError(MmtError):
    ''' A Standard MIDI File could not be parsed '''
    def __init__(self, message: str, offset: int = None):
        if offset is not None:
            message = f'{message} (at byte offset {offset})'
        super().__init__(message)
        self.offset = offset


class GrammarError(MmtError):
    ''' An event sequence breaks the event grammar '''
    def __init__(self, message: str, index: int):
        super().__init__(f'event {index}: {message}')
        self.index = index


class ContractError(MmtError):
    ''' Arguments do not fit together (shapes, pairings) '''


class DegenerateDistributionError(MmtError):
    ''' Every retained outcome of a distribution has zero probability '''


class ConstraintConflictError(MmtError):
    ''' Decoding constraints removed all probability mass from a field '''


class PromptError(MmtError):
    ''' A generation prompt is not valid for its mode '''


class ConfigError(MmtError):
    ''' A configuration value is invalid '''


class TrainingError(MmtError):
    ''' Training had to be aborted '''
    def __init__(self, message: str, checkpoint_path=None):
        if checkpoint_path is not None:
            message = f'{message}; diagnostic checkpoint written to "{checkpoint_path}"'
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
