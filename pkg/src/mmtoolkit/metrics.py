''' Objective metrics of generated music and token counts under other representations.

Bars are fixed at four beats (48 time steps). Entropy is in bits.
'''
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import csv
import logging
import math

import numpy as np

from mmtoolkit.exceptions import UndefinedMetricError
from mmtoolkit.instruments import InstrumentMap
from mmtoolkit.score import RESOLUTION, SECONDS_PER_BEAT, MusicScore
from mmtoolkit.utils import mean_confidence_interval


LOGGER = logging.getLogger(__name__)

BAR_STEPS = 4 * RESOLUTION
N_PITCH_CLASSES = 12
MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
MINOR_SCALE = (0, 2, 3, 5, 7, 8, 10)
TOKEN_BUDGET = 1024
METRIC_NAMES = ('pitch_class_entropy', 'scale_consistency', 'groove_consistency')


def _pitch_class_counts(score: MusicScore) -> np.ndarray:
    if not score.notes:
        raise UndefinedMetricError('the metric is undefined for an empty score')
    pitches = np.array([note.pitch for note in score.notes])
    return np.bincount(pitches % N_PITCH_CLASSES, minlength=N_PITCH_CLASSES)


def pitch_class_entropy(score: MusicScore) -> float:
    ''' Shannon entropy (base 2) of the pitch-class histogram, counting every note once '''
    counts = _pitch_class_counts(score)
    return float(0.0 - (probabilities * np.log2(probabilities)).sum())
    return float(-(probabilities * np.log2(probabilities)).sum())


def scale_consistency(score: MusicScore) -> float:
    ''' Largest fraction of notes that fit one of the 12 major or 12 natural minor scales '''
    counts = _pitch_class_counts(score)
    best = 0
    for root in range(N_PITCH_CLASSES):
        for scale in (MAJOR_SCALE, MINOR_SCALE):
            in_scale = counts[[(root + degree) % N_PITCH_CLASSES for degree in scale]].sum()
            best = max(best, in_scale)
    return float(best / counts.sum())


def grooves(score: MusicScore, bar_steps: int = BAR_STEPS) -> np.ndarray:
    ''' Binary onset-presence pattern of every bar, shape (bars, bar_steps) '''
    if not score.notes:
        raise UndefinedMetricError('grooves are undefined for an empty score')
    onsets = np.array([note.onset for note in score.notes])
    patterns = np.zeros((onsets.max() // bar_steps + 1, bar_steps), dtype=bool)
    patterns[onsets // bar_steps, onsets % bar_steps] = True
    return patterns


def groove_consistency(score: MusicScore, bar_steps: int = BAR_STEPS) -> float:
    ''' One minus the mean normalized Hamming distance between the grooves of adjacent bars '''
    patterns = grooves(score, bar_steps)
    if len(patterns) < 2:
        raise UndefinedMetricError(f'groove consistency needs at least 2 bars, the score spans '
                                   f'{len(patterns)}')
    distances = (patterns[1:] != patterns[:-1]).sum(axis=1) / bar_steps
    return float(1 - distances.mean())


METRICS = {
    'pitch_class_entropy': pitch_class_entropy,
    'scale_consistency': scale_consistency,
    'groove_consistency': groove_consistency,
}


class Representation(Enum):
    MMT = 'mmt'
    MMM = 'mmm'
    REMI = 'remi'

    @staticmethod
    def from_str(label: str):
        clean_label = label.strip().lower().replace('+', '').replace('_', '-')
        if clean_label.endswith('-like'):
            clean_label = clean_label[:-len('-like')]
        for representation in Representation:
            if representation.value == clean_label:
                return representation
        raise ValueError(f'Could not parse representation from "{label}"')


def count_tokens(score: MusicScore, representation: Representation,
                 instrument_map: InstrumentMap = None) -> int:
    ''' Length of the score's token sequence under a representation.

    MMT uses one event per note and per instrument plus start-of-song, start-of-notes and
    end-of-song. The MMM-like count has two global tokens and, per track, two delimiters, an
    instrument token, note-on and note-off per note and one time-shift per beat of the track's
    span. The REMI+-like count has two global tokens, one token per bar, a position token whenever
    the (bar, position) of consecutive notes changes and instrument, pitch and duration per note.
    '''
    if isinstance(representation, str):
        representation = Representation.from_str(representation)
    instrument_map = instrument_map or InstrumentMap.default()
    instruments = [instrument_map.program_to_instrument(note.program) for note in score.notes]

    if representation == Representation.MMT:
        return len(score.notes) + len(set(instruments)) + 3

    if representation == Representation.MMM:
        tracks: Dict[int, List[int]] = {}
        for note, instrument in zip(score.notes, instruments):
            tracks.setdefault(instrument, []).append(note.onset // score.resolution)
        tokens = 2
        for beats in tracks.values():
            tokens += 3 + 2 * len(beats) + max(beats) - min(beats) + 1
        return tokens

    if not score.notes:
        return 2
    onsets = sorted(note.onset for note in score.notes)
    n_bars = onsets[-1] // BAR_STEPS + 1
    n_positions = len({divmod(onset, BAR_STEPS) for onset in onsets})
    return 2 + n_bars + n_positions + 3 * len(onsets)


@dataclass
class MetricSummary:
    mean: float
    ci: float
    count: int

    def __str__(self):
        return f'{self.mean:.4f} ± {self.ci:.4f} (n={self.count})'


@dataclass
class MetricReport:
    ''' Mean and 95% confidence interval of each metric, plus the per-sample values. Metrics that
    are undefined for every sample are None.
    '''
    pitch_class_entropy: Optional[MetricSummary]
    scale_consistency: Optional[MetricSummary]
    groove_consistency: Optional[MetricSummary]
    samples: List[Dict[str, Optional[float]]] = field(default_factory=list)

    def write_csv(self, path: Union[str, Path], names: Sequence[str] = None):
        ''' One row per sample; undefined metrics are left blank '''
        names = names or [str(index) for index in range(len(self.samples))]
        with open(path, 'w', newline='') as file_handle:
            writer = csv.writer(file_handle, lineterminator='\n')
            writer.writerow(('sample',) + METRIC_NAMES)
            for name, values in zip(names, self.samples):
                writer.writerow([name] + ['' if values[metric] is None else f'{values[metric]:.6f}'
                                          for metric in METRIC_NAMES])

    def summary(self) -> str:
        lines = []
        for metric in METRIC_NAMES:
            value = getattr(self, metric)
            lines.append(f'{metric}: {value if value is not None else "undefined"}')
        return '\n'.join(lines) + '\n'


def evaluate_scores(scores: Sequence[MusicScore]) -> MetricReport:
    ''' Compute every metric on every score. A score for which a metric is undefined is left out
    of that metric's summary.
    '''
    samples = []
    for index, score in enumerate(scores):
        values = {}
        for metric, function in METRICS.items():
            try:
                values[metric] = function(score)
            except UndefinedMetricError as exc:
                LOGGER.warning('Sample %d: skipping %s: %s', index, metric, exc)
                values[metric] = None
        samples.append(values)

    summaries = {}
    for metric in METRIC_NAMES:
        defined = [values[metric] for values in samples if values[metric] is not None]
        summaries[metric] = MetricSummary(*mean_confidence_interval(defined),
                                          len(defined)) if defined else None
    return MetricReport(samples=samples, **summaries)


@dataclass
class CompactnessEntry:
    representation: Representation
    tokens: int
    ratio_to_mmt: float
    seconds_per_budget: float


def score_seconds(score: MusicScore) -> float:
    ''' Length of a score at the export tempo, up to the end of its last note '''
    if not score.notes:
        return 0.0
    return max(note.end for note in score.notes) / score.resolution * SECONDS_PER_BEAT


def compactness_report(scores: Sequence[MusicScore], instrument_map: InstrumentMap = None,
                       budget: int = TOKEN_BUDGET) -> List[CompactnessEntry]:
    ''' Token totals of a corpus under each representation, their ratio to MMT and the seconds
    of music that a budget of tokens covers on average.
    '''
    total_seconds = sum(score_seconds(score) for score in scores)
    totals = {representation: sum(count_tokens(score, representation, instrument_map)
                                  for score in scores)
              for representation in Representation}
    entries = []
    for representation, tokens in totals.items():
        ratio = tokens / totals[Representation.MMT] if totals[Representation.MMT] else math.nan
        seconds = budget * total_seconds / tokens if tokens else math.nan
        entries.append(CompactnessEntry(representation, tokens, ratio, seconds))
    return entries


def write_compactness_csv(entries: Sequence[CompactnessEntry], path: Union[str, Path]):
    with open(path, 'w', newline='') as file_handle:
        writer = csv.writer(file_handle, lineterminator='\n')
        writer.writerow(('representation', 'tokens', 'ratio_to_mmt', 'seconds_per_budget'))
        for entry in entries:
            writer.writerow([entry.representation.value, entry.tokens,
                             f'{entry.ratio_to_mmt:.6f}', f'{entry.seconds_per_budget:.6f}'])
