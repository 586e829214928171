''' Relative self-attention analysis of the last attention layer.

For a field d, the mean relative attention of a difference k is the share of attention that note
queries give to earlier note keys whose field value differs from their own by k:

    gamma_k = sum over samples and pairs s > t of a[s, t] * [x_t - x_s == k] / sum of a[s, t]

and the gain is gamma_k minus the share of pairs with difference k, which is what a constant
attention matrix would give. Only note events take part, and field values are decoded from their
codes, so the reserved zero never enters a difference.
'''
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union
import csv
import logging
import operator

import matplotlib
import numpy as np
import torch
from matplotlib.cm import ScalarMappable
from matplotlib.colors import CenteredNorm
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from mmtoolkit.exceptions import ContractError, DomainError, UndefinedMetricError
from mmtoolkit.models.checkpoint import read_container, write_container
from mmtoolkit.models.transformer import MultitrackTransformer
from mmtoolkit.representation import EventSequence, EventType, Field, FieldVocab


LOGGER = logging.getLogger(__name__)

ANALYZED_FIELDS = (Field.BEAT, Field.POSITION, Field.PITCH)
DEFAULT_SAMPLES = 100
PROFILE_CSV = 'attention_profile.csv'
TRACES_NAME = 'traces.ckpt'
PROFILE_HEADER = ('field', 'head', 'k', 'gamma', 'gain')
ROW_TOLERANCE = 1e-6


@dataclass
class AttentionTrace:
    ''' Last-layer attention of one sample.

    weights has shape (heads, n, n) with rows summing to 1 over t <= s; codes has shape (n, 6).
    '''
    weights: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.weights.ndim != 3 or self.weights.shape[1] != self.weights.shape[2]:
            raise ContractError(f'attention weights need shape (heads, n, n), got '
                                f'{self.weights.shape}')
        if self.codes.shape != (self.weights.shape[1], len(Field)):
            raise ContractError(f'codes of shape {self.codes.shape} do not fit weights of shape '
                                f'{self.weights.shape}')

    @property
    def heads(self) -> int:
        return self.weights.shape[0]

    def check(self, tolerance: float = ROW_TOLERANCE):
        ''' Raise a DomainError unless weights are causal probabilities '''
        if self.weights.min() < 0 or self.weights.max() > 1:
            raise DomainError('attention weights must lie in [0, 1]')
        if np.triu(self.weights, k=1).any():
            raise DomainError('attention weights must vanish above the diagonal')
        row_sums = self.weights.sum(axis=-1)
        if not np.allclose(row_sums, 1.0, rtol=0, atol=tolerance):
            raise DomainError(f'attention rows must sum to 1, worst row sums to '
                              f'{row_sums.flat[np.abs(row_sums - 1).argmax()]}')


@dataclass
class PairStatistics:
    ''' Partial sums over samples. Adding two of them merges their samples. '''
    weighted: np.ndarray
    weight_total: np.ndarray
    counts: np.ndarray
    pairs: int

    def __add__(self, other: 'PairStatistics') -> 'PairStatistics':
        return PairStatistics(self.weighted + other.weighted,
                              self.weight_total + other.weight_total,
                              self.counts + other.counts, self.pairs + other.pairs)


@dataclass
class RelAttnProfile:
    ''' gamma and gain per head (rows) and difference (columns, values in ks) of one field '''
    field: Field
    ks: np.ndarray
    gamma: np.ndarray
    gain: Optional[np.ndarray] = None
    pairs: int = 0
    head_labels: Optional[List[str]] = None

    def __post_init__(self):
        if self.head_labels is None:
            self.head_labels = [str(head) for head in range(len(self.gamma))]


def _field_offset(field: Field, vocab: FieldVocab) -> int:
    return vocab[field]


def pair_statistics(trace: AttentionTrace, field: Field,
                    vocab: FieldVocab = None) -> PairStatistics:
    ''' Attention mass and pair count of every difference in one trace '''
    vocab = vocab or FieldVocab()
    offset = _field_offset(field, vocab)
    bins = 2 * offset + 1
    notes = np.flatnonzero(trace.codes[:, Field.TYPE] == EventType.NOTE)
    # Codes are the decoded value plus one, so code differences are value differences
    values = trace.codes[notes, field]
    differences = values[None, :] - values[:, None]
    query, key = np.tril_indices(len(notes), k=-1)
    indices = differences[query, key] + offset
    weights = trace.weights[:, notes[:, None], notes[None, :]][:, query, key]

    weighted = np.stack([np.bincount(indices, weights=head_weights, minlength=bins)
                         for head_weights in weights]) if len(indices) else \
        np.zeros((trace.heads, bins))
    return PairStatistics(weighted, weights.sum(axis=-1),
                          np.bincount(indices, minlength=bins).astype(np.float64), len(indices))


def accumulate(traces: Sequence[AttentionTrace], field: Field, vocab: FieldVocab = None,
               workers: int = None) -> PairStatistics:
    ''' Sum the pair statistics of every trace, computed in a thread pool '''
    if not traces:
        raise UndefinedMetricError('no attention traces to analyze')
    heads = {trace.heads for trace in traces}
    if len(heads) > 1:
        raise ContractError(f'traces disagree on the number of heads: {sorted(heads)}')
    with ThreadPoolExecutor(max_workers=workers) as executor:
        partials = list(executor.map(lambda trace: pair_statistics(trace, field, vocab), traces))
    return reduce(operator.add, partials)


def mean_relative_attention(traces: Sequence[AttentionTrace], field: Union[Field, str],
                            vocab: FieldVocab = None, workers: int = None) -> RelAttnProfile:
    ''' gamma per head over every observed difference.

    Raises:
        UndefinedMetricError: If the traces hold no pair of note events
    '''
    if isinstance(field, str):
        field = Field.from_str(field)
    vocab = vocab or FieldVocab()
    statistics = accumulate(traces, field, vocab, workers)
    if not statistics.pairs:
        raise UndefinedMetricError(f'no pair of note events to compare on {field.name.lower()}')
    if not statistics.weight_total.all():
        raise UndefinedMetricError('a head gives no attention to any note pair')
    observed = np.flatnonzero(statistics.counts)
    gamma = statistics.weighted[:, observed] / statistics.weight_total[:, None]
    return RelAttnProfile(field, observed - _field_offset(field, vocab), gamma,
                          pairs=statistics.pairs)


def relative_attention_gain(profile: RelAttnProfile, traces: Sequence[AttentionTrace],
                            vocab: FieldVocab = None, workers: int = None) -> RelAttnProfile:
    ''' Subtract from gamma the pair frequency of each difference. The traces must be the ones
    gamma was computed from.
    '''
    vocab = vocab or FieldVocab()
    statistics = accumulate(traces, profile.field, vocab, workers)
    observed = np.flatnonzero(statistics.counts)
    ks = observed - _field_offset(profile.field, vocab)
    if (statistics.pairs != profile.pairs or not np.array_equal(ks, profile.ks)
            or statistics.weighted.shape[0] != profile.gamma.shape[0]):
        raise ContractError('gamma was not computed from these traces')
    frequencies = statistics.counts[observed] / statistics.pairs
    return RelAttnProfile(profile.field, profile.ks, profile.gamma,
                          profile.gamma - frequencies[None, :], profile.pairs,
                          profile.head_labels)


def analyze(traces: Sequence[AttentionTrace], fields: Iterable[Field] = ANALYZED_FIELDS,
            vocab: FieldVocab = None, workers: int = None) -> List[RelAttnProfile]:
    return [relative_attention_gain(mean_relative_attention(traces, field, vocab, workers),
                                    traces, vocab, workers)
            for field in fields]


def aggregate_heads(profile: RelAttnProfile) -> RelAttnProfile:
    ''' Average gamma and gain over heads into a single row labelled "mean" '''
    gain = None if profile.gain is None else profile.gain.mean(axis=0, keepdims=True)
    return RelAttnProfile(profile.field, profile.ks, profile.gamma.mean(axis=0, keepdims=True),
                          gain, profile.pairs, ['mean'])


@torch.no_grad()
def collect_traces(model: MultitrackTransformer, sequences: Iterable[EventSequence],
                   n_samples: int = DEFAULT_SAMPLES) -> List[AttentionTrace]:
    ''' Run the model over up to n_samples sequences and keep its last-layer attention '''
    model.eval()
    device = next(model.parameters()).device
    traces = []
    for sequence in sequences:
        if len(traces) >= n_samples:
            break
        codes = sequence.to_array()[:model.config.max_len]
        _, attentions = model(torch.from_numpy(codes)[None].to(device), return_attention=True)
        traces.append(AttentionTrace(attentions[-1][0].double().cpu().numpy(), codes))
    LOGGER.info('Collected attention traces of %d samples', len(traces))
    return traces


def save_traces(traces: Sequence[AttentionTrace], path: Union[str, Path]):
    arrays = {}
    for index, trace in enumerate(traces):
        arrays[f'sample{index}/weights'] = trace.weights
        arrays[f'sample{index}/codes'] = trace.codes
    write_container(path, {'kind': 'attention', 'samples': len(traces)}, arrays)


def load_traces(path: Union[str, Path]) -> List[AttentionTrace]:
    header, arrays = read_container(path)
    if header.get('kind') != 'attention':
        raise DomainError(f'"{path}" does not hold attention traces')
    return [AttentionTrace(arrays[f'sample{index}/weights'],
                           np.rint(arrays[f'sample{index}/codes']))
            for index in range(header['samples'])]


def write_profile_csv(profiles: Sequence[RelAttnProfile], path: Union[str, Path]):
    with open(path, 'w', newline='') as file_handle:
        writer = csv.writer(file_handle, lineterminator='\n')
        writer.writerow(PROFILE_HEADER)
        for profile in profiles:
            gain = profile.gain if profile.gain is not None else np.zeros_like(profile.gamma)
            for row, label in enumerate(profile.head_labels):
                for column, k in enumerate(profile.ks):
                    writer.writerow([profile.field.name.lower(), label, int(k),
                                     f'{profile.gamma[row, column]:.12f}',
                                     f'{gain[row, column]:.12f}'])


def _cell_class(value: float) -> str:
    if value > 0:
        return 'positive'
    if value < 0:
        return 'negative'
    return 'zero'


def plot_profile(profile: RelAttnProfile, path: Union[str, Path]):
    ''' Heatmap of the gains, one row per head and one column per difference. Red cells are
    positive, blue cells negative; each cell is an SVG group with id gain-{sign}-{head}-{k}.
    '''
    gain = profile.gain if profile.gain is not None else np.zeros_like(profile.gamma)
    halfrange = float(np.abs(gain).max()) if gain.size else 0.0
    norm = CenteredNorm(vcenter=0.0, halfrange=halfrange or 1e-12)
    colormap = matplotlib.colormaps['RdBu_r']

    figure = Figure(figsize=(max(4.0, 0.12 * len(profile.ks) + 2), 1 + 0.4 * len(gain)))
    axes = figure.add_subplot()
    for row, label in enumerate(profile.head_labels):
        for column, k in enumerate(profile.ks):
            value = gain[row, column]
            axes.add_patch(Rectangle((k - 0.5, row - 0.5), 1, 1, facecolor=colormap(norm(value)),
                                     gid=f'gain-{_cell_class(value)}-{label}-{int(k)}'))
    if len(profile.ks):
        axes.set_xlim(profile.ks.min() - 0.5, profile.ks.max() + 0.5)
    axes.set_ylim(len(profile.head_labels) - 0.5, -0.5)
    axes.set_yticks(range(len(profile.head_labels)))
    axes.set_yticklabels(profile.head_labels)
    axes.set_xlabel(f'{profile.field.name.lower()} difference')
    axes.set_ylabel('head')
    figure.colorbar(ScalarMappable(norm=norm, cmap=colormap), ax=axes, label='gain')

    with matplotlib.rc_context({'svg.hashsalt': 'mmtoolkit'}):
        figure.savefig(path, format='svg', metadata={'Date': None})


def export_profile(profiles: Sequence[RelAttnProfile], out_dir: Union[str, Path],
                   include_mean: bool = False) -> List[Path]:
    ''' Write attention_profile.csv and one attention_{field}.svg heatmap per profile.

    Returns:
        (List[Path]): The written files
    '''
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if include_mean:
        profiles = [merged for profile in profiles
                    for merged in (profile, aggregate_heads(profile))]
    csv_path = out_dir / PROFILE_CSV
    write_profile_csv(profiles, csv_path)
    written = [csv_path]

    for profile in profiles:
        if profile.head_labels == ['mean'] and include_mean:
            continue
        svg_path = out_dir / f'attention_{profile.field.name.lower()}.svg'
        plot_profile(profile, svg_path)
        written.append(svg_path)
    return written
