''' Internal score model plus Standard MIDI File import and export.

Scores are quantized to RESOLUTION time steps per quarter note. Tempo, velocity and drum tracks
are discarded on import; export uses a fixed tempo of 120 BPM and a fixed velocity.
'''
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union
import io
import logging

import mido

from mmtoolkit.exceptions import DomainError, EmptyScoreError, MidiParseError


LOGGER = logging.getLogger(__name__)

RESOLUTION = 12
EXPORT_TICKS_PER_BEAT = 480
EXPORT_BPM = 120
EXPORT_VELOCITY = 64
SECONDS_PER_BEAT = 60 / EXPORT_BPM

DRUM_CHANNEL = 9
# Bank select MSB values that turn a channel into a rhythm channel (GM2 and XG)
DRUM_BANKS = (120, 127)


@dataclass(frozen=True, order=True)
class Note:
    ''' A single note. Onset and duration are counted in time steps. '''
    onset: int
    pitch: int
    duration: int
    program: int = 0

    def __post_init__(self):
        if self.onset < 0:
            raise DomainError(f'note onset must not be negative, got {self.onset}')
        if not 0 <= self.pitch <= 127:
            raise DomainError(f'note pitch {self.pitch} is outside of 0-127')
        if self.duration < 1:
            raise DomainError(f'note duration must be at least 1, got {self.duration}')
        if not 0 <= self.program <= 127:
            raise DomainError(f'MIDI program {self.program} is outside of 0-127')

    @property
    def end(self) -> int:
        return self.onset + self.duration


@dataclass
class MusicScore:
    ''' An instrument-tagged list of notes without tempo, velocity or drums '''
    notes: List[Note] = field(default_factory=list)
    resolution: int = RESOLUTION

    def __post_init__(self):
        if self.resolution != RESOLUTION:
            raise DomainError(f'scores use {RESOLUTION} steps per quarter note, got '
                              f'{self.resolution}')

    def __len__(self):
        return len(self.notes)

    def sorted(self) -> 'MusicScore':
        return MusicScore(sorted(self.notes), self.resolution)

    def programs(self) -> List[int]:
        return sorted({note.program for note in self.notes})

    def trim(self, max_beat: int) -> 'MusicScore':
        ''' Drop every note that starts on or after beat max_beat '''
        limit = max_beat * self.resolution
        kept = [note for note in self.notes if note.onset < limit]
        if len(kept) < len(self.notes):
            LOGGER.debug('Trimmed %d notes starting after beat %d', len(self.notes) - len(kept),
                         max_beat)
        return MusicScore(kept, self.resolution)


def round_half_up(numerator: int, denominator: int) -> int:
    ''' Integer division of non-negative numbers, rounding halves up '''
    return (2 * numerator + denominator) // (2 * denominator)


def load_midi(path: Union[str, Path]) -> MusicScore:
    ''' Read a format 0 or format 1 Standard MIDI File.

    Channel state (program and drum bank) is shared by every track on the same MIDI port, so a
    program change in one track applies to notes in another.

    Args:
        path (Union[str, Path]): The file to read

    Returns:
        (MusicScore): The non-drum notes of the file, rescaled to RESOLUTION steps per quarter note
    '''
    ticks_per_beat, data = _check_chunks(Path(path).read_bytes())
    try:
        midi = mido.MidiFile(file=io.BytesIO(data))
    except (OSError, EOFError, KeyError, IndexError, ValueError) as exc:
        raise MidiParseError(f'could not parse the track data of "{path}": {exc}') from exc

    notes = _read_events(_merge_tracks(midi.tracks), ticks_per_beat)
    if not notes:
        raise EmptyScoreError(f'"{path}" contains no non-drum notes')
    LOGGER.debug('Loaded %d notes from "%s"', len(notes), path)
    return MusicScore(sorted(notes))


def _check_chunks(data: bytes) -> Tuple[int, bytes]:
    ''' Walk the chunk structure of a Standard MIDI File.

    Returns:
        (Tuple[int, bytes]): The number of ticks per quarter note declared in the header, and the
            file with every chunk other than MThd and MTrk removed
    '''
    if len(data) < 14 or data[:4] != b'MThd':
        raise MidiParseError('file does not start with an MThd header chunk', 0)
    header_length = int.from_bytes(data[4:8], 'big')
    if header_length < 6:
        raise MidiParseError(f'header chunk length {header_length} is shorter than 6', 4)
    smf_format = int.from_bytes(data[8:10], 'big')
    if smf_format not in (0, 1):
        raise MidiParseError(f'unsupported SMF format {smf_format}', 8)
    declared_tracks = int.from_bytes(data[10:12], 'big')
    division = int.from_bytes(data[12:14], 'big')
    if division & 0x8000:
        raise MidiParseError('SMPTE time division is not supported', 12)
    if division == 0:
        raise MidiParseError('time division must not be zero', 12)

    offset = 8 + header_length
    kept = [data[:offset]]
    found_tracks = 0
    while offset < len(data):
        if offset + 8 > len(data):
            raise MidiParseError('truncated chunk header', offset)
        chunk_type = data[offset:offset + 4]
        chunk_length = int.from_bytes(data[offset + 4:offset + 8], 'big')
        if offset + 8 + chunk_length > len(data):
            raise MidiParseError(f'chunk length {chunk_length} runs past the end of the file',
                                 offset)
        if chunk_type == b'MTrk':
            found_tracks += 1
            kept.append(data[offset:offset + 8 + chunk_length])
        else:
            LOGGER.debug('Skipping %d byte chunk of unknown type %r at offset %d', chunk_length,
                         chunk_type, offset)
        offset += 8 + chunk_length
    if found_tracks != declared_tracks:
        raise MidiParseError(f'header declares {declared_tracks} tracks but {found_tracks} '
                             'were found', 10)
    return division, b''.join(kept)


@dataclass(frozen=True, order=True)
class _TimedMessage:
    tick: int
    track: int
    index: int
    port: int
    message: mido.Message = field(compare=False)


def _merge_tracks(tracks: List[mido.MidiTrack]) -> List[_TimedMessage]:
    ''' All channel messages of all tracks in absolute time. Ties keep track order, then the
    order within the track.
    '''
    merged = []
    for track_index, track in enumerate(tracks):
        tick = 0
        port = 0
        for index, message in enumerate(track):
            tick += message.time
            if message.type == 'midi_port':
                port = message.port
            elif not message.is_meta:
                merged.append(_TimedMessage(tick, track_index, index, port, message))
    merged.sort()
    return merged


def _read_events(events: List[_TimedMessage], ticks_per_beat: int) -> List[Note]:
    notes = []
    # (port, channel) -> program
    programs = {}
    drum_channels = set()
    # (track, port, channel, pitch) -> queue of (start tick, program, is drum)
    sounding = defaultdict(deque)
    dropped_drums = 0
    for event in events:
        message = event.message
        if message.type not in ('program_change', 'control_change', 'note_on', 'note_off'):
            continue
        channel = (event.port, message.channel)
        if message.type == 'program_change':
            programs[channel] = message.program
        elif message.type == 'control_change':
            if message.control == 0 and message.value in DRUM_BANKS:
                drum_channels.add(channel)
        elif message.type == 'note_on' and message.velocity > 0:
            sounding[(event.track,) + channel + (message.note,)].append(
                (event.tick, programs.get(channel, 0),
                 message.channel == DRUM_CHANNEL or channel in drum_channels))
        else:
            queue = sounding.get((event.track,) + channel + (message.note,))
            if not queue:
                LOGGER.debug('Ignoring note-off without note-on in track %d at tick %d',
                             event.track, event.tick)
                continue
            start, program, is_drum = queue.popleft()
            if is_drum:
                dropped_drums += 1
                continue
            onset = round_half_up(start * RESOLUTION, ticks_per_beat)
            duration = round_half_up((event.tick - start) * RESOLUTION, ticks_per_beat)
            notes.append(Note(onset, message.note, max(1, duration), program))

    unmatched = sum(len(queue) for queue in sounding.values())
    if unmatched:
        LOGGER.warning('Ignoring %d unterminated notes', unmatched)
    if dropped_drums:
        LOGGER.debug('Dropped %d drum notes', dropped_drums)
    return notes


def _assign_voices(notes: List[Note]) -> List[Tuple[int, List[Note]]]:
    ''' Split notes into (program, notes) voices where no pitch sounds twice at once.
    A note goes to the first voice of its program that is free for its pitch.
    '''
    voices = []
    # program -> list of (voice index, pitch -> end of the last note)
    free_at = defaultdict(list)
    for note in sorted(notes):
        for voice_index, pitch_ends in free_at[note.program]:
            if pitch_ends.get(note.pitch, 0) <= note.onset:
                break
        else:
            voice_index, pitch_ends = len(voices), {}
            voices.append((note.program, []))
            free_at[note.program].append((voice_index, pitch_ends))
        pitch_ends[note.pitch] = note.end
        voices[voice_index][1].append(note)
    return voices


def save_midi(score: MusicScore, path: Union[str, Path]):
    ''' Write a score as a format 1 Standard MIDI File with one track per voice.

    A program gets one voice, plus one more for every note that starts while a note of the same
    pitch and program is still sounding. Each voice owns a channel; once the fifteen melodic
    channels are used up, voices continue on the next MIDI port. The file uses
    EXPORT_TICKS_PER_BEAT ticks per quarter note, a tempo of EXPORT_BPM and the velocity
    EXPORT_VELOCITY for every note.
    '''
    midi = mido.MidiFile(type=1, ticks_per_beat=EXPORT_TICKS_PER_BEAT)
    if not score.notes:
        empty = mido.MidiTrack()
        empty.append(mido.MetaMessage('end_of_track', time=0))
        midi.tracks.append(empty)
        midi.save(str(path))
        return

    conductor = mido.MidiTrack()
    conductor.append(mido.MetaMessage('set_tempo', tempo=mido.bpm2tempo(EXPORT_BPM), time=0))
    conductor.append(mido.MetaMessage('end_of_track', time=0))
    midi.tracks.append(conductor)

    scale = EXPORT_TICKS_PER_BEAT // score.resolution
    channels = [channel for channel in range(16) if channel != DRUM_CHANNEL]
    voices = _assign_voices(score.notes)
    for voice_number, (program, notes) in enumerate(voices):
        port, channel = divmod(voice_number, len(channels))
        channel = channels[channel]
        track = mido.MidiTrack()
        track.append(mido.MetaMessage('midi_port', port=port, time=0))
        track.append(mido.Message('program_change', channel=channel, program=program, time=0))

        # Note-offs sort before note-ons on the same tick
        timeline = []
        for note in notes:
            timeline.append((note.onset * scale, 1, note.pitch))
            timeline.append((note.end * scale, 0, note.pitch))
        timeline.sort()

        now = 0
        for tick, is_on, pitch in timeline:
            if is_on:
                message = mido.Message('note_on', channel=channel, note=pitch,
                                       velocity=EXPORT_VELOCITY, time=tick - now)
            else:
                message = mido.Message('note_off', channel=channel, note=pitch, velocity=0,
                                       time=tick - now)
            track.append(message)
            now = tick
        track.append(mido.MetaMessage('end_of_track', time=0))
        midi.tracks.append(track)
    midi.save(str(path))
    LOGGER.debug('Wrote %d notes in %d voices to "%s"', len(score.notes), len(voices), path)
