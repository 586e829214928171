''' Generation throughput and sample length. '''
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union
import logging
import platform
import time

import torch

from mmtoolkit.exceptions import DomainError
from mmtoolkit.models.checkpoint import ModelCheckpoint
from mmtoolkit.models.transformer import MultitrackTransformer
from mmtoolkit.representation import EventSequence, decode
from mmtoolkit.sampler import GenerationMode, GenSpec, generate, unconditioned_prompt
from mmtoolkit.score import SECONDS_PER_BEAT


LOGGER = logging.getLogger(__name__)


@dataclass
class BenchReport:
    n_samples: int
    avg_sample_length_sec: float
    notes_per_second: float
    events_per_note: float
    hardware: str

    def to_text(self) -> str:
        return ''.join(f'{name}: {value}\n' for name, value in asdict(self).items())


def hardware_descriptor() -> str:
    return (f'{platform.platform()}; processor {platform.processor() or "unknown"}; '
            f'torch {torch.__version__}; {torch.get_num_threads()} threads')


def sample_length_seconds(sequence: EventSequence) -> float:
    ''' Seconds up to the beat of the last note at 120 BPM; 0 for a sequence without notes '''
    return max((event.beat for event in sequence.notes()), default=0) * SECONDS_PER_BEAT


def benchmark_generation(model: Union[MultitrackTransformer, ModelCheckpoint], n_samples: int,
                         max_len: int = 1024, seed: int = 0, warmup: int = 1) -> BenchReport:
    ''' Time unconditioned generation.

    Args:
        model (Union[MultitrackTransformer, ModelCheckpoint]): The network to sample from
        n_samples (int): Timed samples, seeded seed, seed + 1, ...
        max_len (int): Longest sequence to generate
        seed (int): Seed of the first timed sample
        warmup (int): Untimed samples generated first

    Returns:
        (BenchReport): Mean sample length, note throughput and events per note
    '''
    if n_samples < 1:
        raise DomainError(f'n_samples must be at least 1, got {n_samples}')
    if isinstance(model, ModelCheckpoint):
        model = model.build_model()

    def spec(sample_seed: int) -> GenSpec:
        return GenSpec(GenerationMode.UNCONDITIONED, unconditioned_prompt(), max_len=max_len,
                       seed=sample_seed)

    for index in range(warmup):
        generate(model, spec(seed + n_samples + index))

    elapsed = 0.0
    lengths = []
    note_events = 0
    decoded_notes = 0
    for index in range(n_samples):
        start = time.perf_counter()
        sequence = generate(model, spec(seed + index))
        elapsed += time.perf_counter() - start
        lengths.append(sample_length_seconds(sequence))
        note_events += len(sequence.notes())
        decoded_notes += len(decode(sequence).notes)
        LOGGER.debug('Sample %d: %d events, %d notes', index, len(sequence),
                     len(sequence.notes()))

    if not decoded_notes:
        LOGGER.warning('No sample holds a note; events per note is reported as 0')
    return BenchReport(
        n_samples=n_samples,
        avg_sample_length_sec=sum(lengths) / n_samples,
        notes_per_second=decoded_notes / elapsed if elapsed > 0 else 0.0,
        events_per_note=note_events / decoded_notes if decoded_notes else 0.0,
        hardware=hardware_descriptor(),
    )


def write_report(report: BenchReport, path: Union[str, Path]):
    Path(path).write_text(report.to_text())
