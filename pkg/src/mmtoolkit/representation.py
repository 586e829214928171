''' The six-field multitrack event representation.

Every event is a tuple (type, beat, position, pitch, duration, instrument). Code 0 is reserved
for undefined values in every field but type, so beat, position, pitch and instrument codes are
the value plus one, and duration codes are 1-based indices into DURATIONS. A song is encoded as

    start-of-song, instrument..., start-of-notes, note..., end-of-song

with one note event per note, sorted by (beat, position, pitch, duration, instrument).
'''
from bisect import bisect_left
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, List, NamedTuple, Sequence, Tuple, Union
import csv

import numpy as np

from mmtoolkit.exceptions import DomainError, GrammarError, OutOfRangeError
from mmtoolkit.instruments import InstrumentMap
from mmtoolkit.score import RESOLUTION, MusicScore, Note


MAX_BEAT = 256
DURATIONS = (1, 2, 3, 4, 6, 8, 10, 12, 16, 20, 24, 30, 36, 40, 48, 60, 72, 84, 96, 120, 144, 168,
             192)
FIELD_NAMES = ('type', 'beat', 'position', 'pitch', 'duration', 'instrument')


class EventType(IntEnum):
    ''' The type code of an event. Type codes never decrease along a sequence. '''
    START_OF_SONG = 0
    INSTRUMENT = 1
    START_OF_NOTES = 2
    NOTE = 3
    END_OF_SONG = 4

    @staticmethod
    def from_str(label: str):
        clean_label = label.strip().upper().replace('-', '_')
        parsed = getattr(EventType, clean_label, None)
        if parsed is None:
            raise ValueError(f'Could not parse event type from "{label}"')
        return parsed


class Field(IntEnum):
    ''' Column index of each field within an event '''
    TYPE = 0
    BEAT = 1
    POSITION = 2
    PITCH = 3
    DURATION = 4
    INSTRUMENT = 5

    @staticmethod
    def from_str(label: str):
        parsed = getattr(Field, label.strip().upper(), None)
        if parsed is None:
            raise ValueError(f'Could not parse event field from "{label}"')
        return parsed


NOTE_FIELDS = (Field.BEAT, Field.POSITION, Field.PITCH, Field.DURATION, Field.INSTRUMENT)


def type_codes() -> List[EventType]:
    ''' The event types in code order '''
    return list(EventType)


@dataclass(frozen=True)
class FieldVocab:
    ''' Number of codes in each field, reserved zero included '''
    type: int = len(EventType)
    beat: int = MAX_BEAT + 1
    position: int = RESOLUTION + 1
    pitch: int = 128 + 1
    duration: int = len(DURATIONS) + 1
    instrument: int = 64 + 1

    @property
    def sizes(self) -> Tuple[int, ...]:
        return (self.type, self.beat, self.position, self.pitch, self.duration, self.instrument)

    def __getitem__(self, field: int) -> int:
        return self.sizes[field]


class Event(NamedTuple):
    type: int
    beat: int = 0
    position: int = 0
    pitch: int = 0
    duration: int = 0
    instrument: int = 0

    @property
    def is_note(self) -> bool:
        return self.type == EventType.NOTE

    @classmethod
    def start_of_song(cls) -> 'Event':
        return cls(int(EventType.START_OF_SONG))

    @classmethod
    def for_instrument(cls, code: int) -> 'Event':
        return cls(int(EventType.INSTRUMENT), instrument=code)

    @classmethod
    def start_of_notes(cls) -> 'Event':
        return cls(int(EventType.START_OF_NOTES))

    @classmethod
    def end_of_song(cls) -> 'Event':
        return cls(int(EventType.END_OF_SONG))


class EventSequence:
    ''' An ordered list of events, readable from and writable to CSV '''

    def __init__(self, events: Iterable[Sequence[int]] = ()):
        self.events = [Event(*(int(code) for code in event)) for event in events]

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return EventSequence(self.events[index])
        return self.events[index]

    def __eq__(self, other):
        if not isinstance(other, EventSequence):
            return NotImplemented
        return self.events == other.events

    def __repr__(self):
        return f'EventSequence({self.events!r})'

    def append(self, event: Sequence[int]):
        self.events.append(Event(*(int(code) for code in event)))

    def notes(self) -> List[Event]:
        return [event for event in self.events if event.is_note]

    def instruments(self) -> List[int]:
        ''' Instrument codes declared by instrument events, in sequence order '''
        return [event.instrument for event in self.events
                if event.type == EventType.INSTRUMENT]

    def to_array(self) -> np.ndarray:
        return np.array(self.events, dtype=np.int64).reshape(-1, len(FIELD_NAMES))

    @classmethod
    def from_array(cls, codes: np.ndarray) -> 'EventSequence':
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != len(FIELD_NAMES):
            raise DomainError(f'expected an (n, {len(FIELD_NAMES)}) array, got {codes.shape}')
        return cls(codes.tolist())

    def write_csv(self, path: Union[str, Path]):
        with open(path, 'w', newline='') as file_handle:
            writer = csv.writer(file_handle, lineterminator='\n')
            writer.writerow(FIELD_NAMES)
            writer.writerows(self.events)

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> 'EventSequence':
        with open(path, 'r', newline='') as file_handle:
            reader = csv.reader(file_handle)
            header = next(reader, None)
            if tuple(header or ()) != FIELD_NAMES:
                raise DomainError(f'"{path}" must start with the header {",".join(FIELD_NAMES)}')
            events = []
            for line_number, row in enumerate(reader, 2):
                if len(row) != len(FIELD_NAMES):
                    raise DomainError(f'line {line_number} of "{path}" has {len(row)} fields')
                try:
                    events.append([int(code) for code in row])
                except ValueError as exc:
                    raise DomainError(f'line {line_number} of "{path}" holds a non-integer code'
                                      ) from exc
        return cls(events)


def decompose_onset(onset: int, resolution: int = RESOLUTION) -> Tuple[int, int]:
    ''' Split an onset into the beat it lies in and its position within that beat '''
    if onset < 0:
        raise DomainError(f'onset must not be negative, got {onset}')
    return divmod(onset, resolution)


def quantize_duration(duration: int, durations: Sequence[int] = DURATIONS) -> int:
    ''' Return the 1-based code of the closest known duration. Ties go to the shorter duration
    and anything longer than the longest known duration is clamped to it.
    '''
    if duration < 1:
        raise DomainError(f'duration must be at least 1, got {duration}')
    duration = min(duration, durations[-1])
    index = bisect_left(durations, duration)
    if durations[index] == duration or index == 0:
        return index + 1
    # durations[index - 1] < duration < durations[index]
    if duration - durations[index - 1] <= durations[index] - duration:
        return index
    return index + 1


def canonical_sort(events: Iterable[Event]) -> List[Event]:
    ''' Stable sort of note events by beat, position, pitch, duration and instrument '''
    events = list(events)
    for event in events:
        if not event.is_note:
            raise DomainError(f'only note events can be sorted, got {event}')
    return sorted(events, key=lambda event: event[1:])


def encode(score: MusicScore, instrument_map: InstrumentMap = None) -> EventSequence:
    ''' Encode a score as an event sequence.

    Args:
        score (MusicScore): The score to encode. Every onset must lie before beat MAX_BEAT.
        instrument_map (InstrumentMap): The program to instrument mapping, the default map if None

    Returns:
        (EventSequence): One instrument event per distinct instrument and one note event per note
    '''
    instrument_map = instrument_map or InstrumentMap.default()
    note_events = []
    for note in score.notes:
        beat, position = decompose_onset(note.onset, score.resolution)
        if beat >= MAX_BEAT:
            raise OutOfRangeError(f'note at step {note.onset} starts after beat {MAX_BEAT}; '
                                  'trim the score before encoding it')
        instrument = instrument_map.program_to_instrument(note.program)
        note_events.append(Event(int(EventType.NOTE), beat + 1, position + 1, note.pitch + 1,
                                 quantize_duration(note.duration), instrument + 1))

    instruments = sorted({event.instrument for event in note_events})
    events = [Event.start_of_song()]
    events.extend(Event.for_instrument(code) for code in instruments)
    events.append(Event.start_of_notes())
    events.extend(canonical_sort(note_events))
    events.append(Event.end_of_song())
    return EventSequence(events)


def decode(sequence: EventSequence, durations: Sequence[int] = DURATIONS,
           instrument_map: InstrumentMap = None) -> MusicScore:
    ''' Decode an event sequence. The order of the note events does not matter.

    Args:
        sequence (EventSequence): A grammatical sequence
        durations (Sequence[int]): The duration table that duration codes index into
        instrument_map (InstrumentMap): Supplies the program written for each instrument

    Returns:
        (MusicScore): One note per note event, sorted
    '''
    instrument_map = instrument_map or InstrumentMap.default()
    check_grammar(sequence, strict=False)
    notes = []
    for event in sequence.notes():
        notes.append(Note(
            onset=RESOLUTION * (event.beat - 1) + event.position - 1,
            pitch=event.pitch - 1,
            duration=durations[event.duration - 1],
            program=instrument_map.representative_program(event.instrument - 1),
        ))
    return MusicScore(sorted(notes))


def check_grammar(sequence: EventSequence, strict: bool = True, vocab: FieldVocab = None,
                  complete: bool = True):
    ''' Raise a GrammarError naming the first event that breaks the event grammar.

    Args:
        sequence (EventSequence): The sequence to check
        strict (bool): Also require note events to have nondecreasing beats
        vocab (FieldVocab): Code ranges to check against, the default vocabulary if None
        complete (bool): Require start-of-notes. Prefixes such as generation prompts may stop
        before it.
    '''
    vocab = vocab or FieldVocab()
    if not len(sequence):
        raise GrammarError('a sequence must start with start-of-song', 0)

    previous_type = None
    previous_beat = 0
    seen_start_of_notes = False
    for index, event in enumerate(sequence):
        for field, size in enumerate(vocab.sizes):
            if not 0 <= event[field] < size:
                raise GrammarError(f'{FIELD_NAMES[field]} code {event[field]} is outside of '
                                   f'0-{size - 1}', index)
        event_type = event.type
        if index == 0 and event_type != EventType.START_OF_SONG:
            raise GrammarError('a sequence must start with start-of-song', index)
        if previous_type is not None:
            if event_type < previous_type:
                raise GrammarError(f'type code decreases from {previous_type} to {event_type}',
                                   index)
            if previous_type == EventType.END_OF_SONG:
                raise GrammarError('events follow end-of-song', index)
            if event_type == previous_type and event_type in (EventType.START_OF_SONG,
                                                              EventType.START_OF_NOTES):
                raise GrammarError(f'repeated {EventType(event_type).name.lower()} event', index)
        if event_type > EventType.START_OF_NOTES and not seen_start_of_notes:
            raise GrammarError('missing start-of-notes before the note list', index)

        if event_type == EventType.NOTE:
            if not all(event[field] for field in NOTE_FIELDS):
                raise GrammarError('note events must define every field', index)
            if strict and event.beat < previous_beat:
                raise GrammarError(f'note beat decreases from {previous_beat} to {event.beat}',
                                   index)
            previous_beat = event.beat
        else:
            if any(event[field] for field in NOTE_FIELDS[:-1]):
                raise GrammarError('only note events may define beat, position, pitch or '
                                   'duration', index)
            if event_type == EventType.INSTRUMENT and not event.instrument:
                raise GrammarError('instrument events must name an instrument', index)
            if event_type != EventType.INSTRUMENT and event.instrument:
                raise GrammarError('only instrument and note events may define an instrument',
                                   index)
        seen_start_of_notes = seen_start_of_notes or event_type == EventType.START_OF_NOTES
        previous_type = event_type

    if complete and not seen_start_of_notes:
        raise GrammarError('missing start-of-notes', len(sequence))
