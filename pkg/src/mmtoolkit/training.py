''' Dataset preparation, augmentation, batching and the optimization loop.

A prepared dataset is a directory of EventSequence CSVs plus a manifest.txt listing one relative
path per line. Training reads the manifest, splits it by song with a seeded shuffle and writes
train.txt, valid.txt and test.txt next to its outputs.
'''
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from itertools import count
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
import csv
import logging
import math

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from mmtoolkit.exceptions import (ConfigError, EmptyScoreError, GrammarError, MmtError,
                                  TrainingError)
from mmtoolkit.instruments import InstrumentMap
from mmtoolkit.models.checkpoint import ModelCheckpoint, TrainingState
from mmtoolkit.models.transformer import ModelConfig, MultitrackTransformer, sequence_loss
from mmtoolkit.representation import (MAX_BEAT, Event, EventSequence, EventType, check_grammar,
                                      encode)
from mmtoolkit.score import load_midi


LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.txt'
SPLIT_NAMES = ('train', 'valid', 'test')
LOG_NAME = 'train_log.csv'
LOG_HEADER = ('step', 'train_loss', 'valid_loss')
PITCH_SHIFTS = (-5, 6)


@dataclass
class TrainConfig:
    data_dir: str = 'data'
    out_dir: str = 'run'
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    max_len: int = 1024
    max_beat: int = MAX_BEAT
    batch_size: int = 4
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    validate_every: int = 1000
    max_steps: int = 200000
    patience: int = 20
    grad_norm_clip: float = 1.0
    augment: bool = True
    num_workers: int = 0
    valid_batches: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(fraction) for fraction in self.split)
        if len(self.split) != len(SPLIT_NAMES):
            raise ConfigError(f'split needs {len(SPLIT_NAMES)} fractions, got {self.split}')
        if any(fraction < 0 for fraction in self.split) or not math.isclose(sum(self.split), 1.0):
            raise ConfigError(f'split fractions must be non-negative and sum to 1, got '
                              f'{self.split}')
        if self.patience < 1:
            raise ConfigError(f'patience must be at least 1, got {self.patience}')
        for name in ('max_len', 'batch_size', 'validate_every', 'max_steps', 'warmup_steps'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be at least 1, got {getattr(self, name)}')
        if not 1 <= self.max_beat <= MAX_BEAT:
            raise ConfigError(f'max_beat must lie in 1-{MAX_BEAT}, got {self.max_beat}')

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingExample(NamedTuple):
    ''' Shift-by-one training pair. Masks are True on real (unpadded) positions. '''
    inputs: torch.Tensor
    targets: torch.Tensor
    input_mask: torch.Tensor
    target_mask: torch.Tensor


@dataclass
class LogEntry:
    step: int
    train_loss: float
    valid_loss: float


def augment(sequence: EventSequence, seed: int, shift: int = None,
            origin: int = None) -> EventSequence:
    ''' Randomly transpose a sequence and move its start to a random note beat.

    Args:
        sequence (EventSequence): A grammatical sequence
        seed (int): Seeds the pitch shift and the choice of origin
        shift (int): Use this pitch shift instead of drawing one from -5 to 6
        origin (int): Use this beat code as the new first beat instead of drawing a note beat

    Returns:
        (EventSequence): The header unchanged, then the surviving notes, re-based so that the
        origin becomes beat code 1
    '''
    rng = np.random.default_rng(seed)
    if shift is None:
        shift = int(rng.integers(PITCH_SHIFTS[0], PITCH_SHIFTS[1] + 1))

    notes = []
    for event in sequence.notes():
        # Pitch codes are the MIDI pitch plus one
        if 1 <= event.pitch + shift <= 128:
            notes.append(event._replace(pitch=event.pitch + shift))
    if len(notes) < len(sequence.notes()):
        LOGGER.debug('Pitch shift %+d dropped %d notes', shift,
                     len(sequence.notes()) - len(notes))

    if notes:
        if origin is None:
            beats = sorted({event.beat for event in notes})
            origin = int(beats[rng.integers(len(beats))])
        notes = [event._replace(beat=event.beat - origin + 1)
                 for event in notes if event.beat >= origin]

    header = [event for event in sequence if event.type < EventType.NOTE]
    return EventSequence(header + notes + [Event.end_of_song()])


def make_example(sequence: EventSequence, max_len: int = 1024,
                 max_beat: int = MAX_BEAT) -> Optional[TrainingExample]:
    ''' Build a padded training pair from a sequence.

    Notes after beat code max_beat are dropped, the sequence is cut to max_len events (its last
    event becomes end-of-song when the cut removes it) and padded with all-zero events.

    Returns:
        (TrainingExample): Inputs and targets of length max_len - 1, or None when the sequence
        holds fewer than 2 events
    '''
    events = [event for event in sequence if not (event.is_note and event.beat > max_beat)]
    if len(events) < 2:
        return None
    if len(events) > max_len:
        events = events[:max_len - 1] + [Event.end_of_song()]

    codes = np.zeros((max_len, len(Event._fields)), dtype=np.int64)
    codes[:len(events)] = np.array(events, dtype=np.int64)
    real = np.arange(max_len) < len(events)
    codes = torch.from_numpy(codes)
    real = torch.from_numpy(real)
    return TrainingExample(codes[:-1], codes[1:], real[:-1], real[1:])


def example_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def shuffle_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


class SequenceDataset(Dataset):
    ''' Training examples built on the fly. Augmentation depends only on (seed, epoch, index). '''

    def __init__(self, sequences: Sequence[EventSequence], config: TrainConfig,
                 augmented: bool = False):
        self.config = config
        self.augmented = augmented
        self.epoch = 0
        self.sequences = [sequence for sequence in sequences
                          if make_example(sequence, config.max_len, config.max_beat) is not None]
        if len(self.sequences) < len(sequences):
            LOGGER.warning('Skipped %d sequences too short to train on',
                           len(sequences) - len(self.sequences))

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.sequences)

    def __getitem__(self, index: int) -> TrainingExample:
        sequence = self.sequences[index]
        if self.augmented:
            sequence = augment(sequence, example_seed(self.config.seed, self.epoch, index))
        return make_example(sequence, self.config.max_len, self.config.max_beat)


def _unique_names(paths: Sequence[Path]) -> List[str]:
    names = []
    seen = set()
    for path in paths:
        name = f'{path.stem}.csv'
        suffix = 1
        while name in seen:
            name = f'{path.stem}-{suffix}.csv'
            suffix += 1
        seen.add(name)
        names.append(name)
    return names


def convert_dataset(midi_paths: Sequence[Union[str, Path]], out_dir: Union[str, Path],
                    instrument_map: InstrumentMap = None, max_beat: int = MAX_BEAT,
                    workers: int = None) -> List[str]:
    ''' Convert MIDI files to EventSequence CSVs and write the manifest.

    Files that cannot be parsed or hold no notes are logged and skipped. Notes starting on or
    after max_beat are dropped.

    Returns:
        (List[str]): Names of the written CSVs, in input order
    '''
    instrument_map = instrument_map or InstrumentMap.default()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [Path(path) for path in midi_paths]
    names = _unique_names(paths)

    def convert(path: Path, name: str) -> Optional[str]:
        try:
            score = load_midi(path).trim(max_beat)
            if not score.notes:
                raise EmptyScoreError(f'no notes before beat {max_beat}')
            sequence = encode(score, instrument_map)
        except MmtError as exc:
            LOGGER.warning('Skipping "%s": %s', path, exc)
            return None
        sequence.write_csv(out_dir / name)
        return name

    with ThreadPoolExecutor(max_workers=workers) as executor:
        converted = [name for name in executor.map(convert, paths, names) if name is not None]

    (out_dir / MANIFEST_NAME).write_text(''.join(f'{name}\n' for name in converted))
    LOGGER.info('Converted %d of %d MIDI files into "%s"', len(converted), len(paths), out_dir)
    return converted


def read_manifest(data_dir: Union[str, Path]) -> List[str]:
    lines = (Path(data_dir) / MANIFEST_NAME).read_text().splitlines()
    return [line.strip() for line in lines if line.strip()]


def load_dataset(data_dir: Union[str, Path], names: Sequence[str] = None,
                 workers: int = None) -> Dict[str, EventSequence]:
    ''' Read the sequences of a prepared dataset, skipping ungrammatical ones '''
    data_dir = Path(data_dir)
    names = read_manifest(data_dir) if names is None else list(names)

    def load(name: str) -> Optional[EventSequence]:
        sequence = EventSequence.read_csv(data_dir / name)
        try:
            check_grammar(sequence, strict=True)
        except GrammarError as exc:
            LOGGER.warning('Skipping "%s": %s', name, exc)
            return None
        return sequence

    with ThreadPoolExecutor(max_workers=workers) as executor:
        sequences = list(executor.map(load, names))
    return {name: sequence for name, sequence in zip(names, sequences) if sequence is not None}


def split_dataset(names: Sequence[str], fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> Tuple[List[str], List[str], List[str]]:
    ''' Seeded shuffle of the songs into train, valid and test lists '''
    order = np.random.default_rng(seed).permutation(len(names))
    shuffled = [names[index] for index in order]
    n_valid = round(len(names) * fractions[1])
    n_test = round(len(names) * fractions[2])
    n_train = len(names) - n_valid - n_test
    return (shuffled[:n_train], shuffled[n_train:n_train + n_valid],
            shuffled[n_train + n_valid:])


def write_split(out_dir: Union[str, Path], splits: Sequence[Sequence[str]]):
    for split_name, names in zip(SPLIT_NAMES, splits):
        (Path(out_dir) / f'{split_name}.txt').write_text(''.join(f'{name}\n' for name in names))


class Trainer:
    ''' Adam with linear warmup, periodic validation, early stopping and checkpointing.

    Writes best.ckpt whenever the validation loss improves, last.ckpt when training stops and
    train_log.csv with one row per validation.
    '''

    def __init__(self, config: TrainConfig, model_config: ModelConfig,
                 train_sequences: Sequence[EventSequence],
                 valid_sequences: Sequence[EventSequence] = (), show_progress: bool = False):
        if model_config.max_len < config.max_len - 1:
            raise ConfigError(f'the model accepts {model_config.max_len} events, training '
                              f'examples hold {config.max_len - 1}')
        self.config = config
        self.model_config = model_config
        self.show_progress = show_progress
        self.out_dir = Path(config.out_dir)
        self.train_data = SequenceDataset(train_sequences, config, augmented=config.augment)
        if not len(self.train_data):
            raise ConfigError('the train split is empty')
        if not valid_sequences:
            LOGGER.warning('The valid split is empty; validating on the train split')
            valid_sequences = train_sequences
        self.valid_data = SequenceDataset(valid_sequences, config)
        self.history: List[LogEntry] = []

        torch.manual_seed(config.seed)
        self.model = MultitrackTransformer(model_config)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.scheduler = LambdaLR(
            self.optimizer, lambda step: min(1.0, (step + 1) / config.warmup_steps))

    def _batches(self):
        ''' Endless stream of training batches, reshuffled every epoch '''
        for epoch in count():
            self.train_data.set_epoch(epoch)
            loader = DataLoader(self.train_data, batch_size=self.config.batch_size, shuffle=True,
                                num_workers=self.config.num_workers,
                                generator=torch.Generator().manual_seed(
                                    shuffle_seed(self.config.seed, epoch)))
            yield from loader

    def _loss(self, batch: TrainingExample) -> torch.Tensor:
        logits = self.model(batch.inputs, batch.input_mask)
        return sequence_loss(logits, batch.targets, batch.target_mask)

    @torch.no_grad()
    def validate(self) -> float:
        self.model.eval()
        loader = DataLoader(self.valid_data, batch_size=self.config.batch_size)
        losses = []
        for index, batch in enumerate(loader):
            if self.config.valid_batches is not None and index >= self.config.valid_batches:
                break
            losses.append(self._loss(batch).item())
        self.model.train()
        return float(np.mean(losses))

    def _checkpoint(self, step: int, best_valid_loss: Optional[float]) -> ModelCheckpoint:
        return ModelCheckpoint.from_model(self.model, TrainingState(step, best_valid_loss))

    def _write_log(self):
        with open(self.out_dir / LOG_NAME, 'w', newline='') as file_handle:
            writer = csv.writer(file_handle, lineterminator='\n')
            writer.writerow(LOG_HEADER)
            for entry in self.history:
                writer.writerow([entry.step, f'{entry.train_loss:.6f}',
                                 f'{entry.valid_loss:.6f}'])

    def train(self) -> ModelCheckpoint:
        ''' Run until max_steps or until patience validations in a row fail to improve.

        Returns:
            (ModelCheckpoint): The checkpoint with the lowest validation loss
        '''
        config = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.model.train()
        best = None
        best_valid_loss = None
        stale_rounds = 0
        recent_losses = []
        step = 0

        progress = tqdm(total=config.max_steps, disable=not self.show_progress, unit='step')
        for batch in self._batches():
            step += 1
            loss = self._loss(batch)
            if not torch.isfinite(loss):
                diagnostic_path = self.out_dir / 'diagnostic.ckpt'
                self._checkpoint(step, best_valid_loss).save(diagnostic_path)
                raise TrainingError(f'loss became {loss.item()} at step {step}', diagnostic_path)
            self.optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), config.grad_norm_clip)
            self.optimizer.step()
            self.scheduler.step()
            recent_losses.append(loss.item())
            progress.update()
            progress.set_postfix(loss=f'{loss.item():.4f}')

            if step % config.validate_every == 0:
                valid_loss = self.validate()
                entry = LogEntry(step, float(np.mean(recent_losses)), valid_loss)
                self.history.append(entry)
                self._write_log()
                recent_losses = []
                LOGGER.info('Step %d: train loss %.4f, valid loss %.4f', step,
                            entry.train_loss, valid_loss)
                if best_valid_loss is None or valid_loss < best_valid_loss:
                    best_valid_loss = valid_loss
                    stale_rounds = 0
                    best = self._checkpoint(step, best_valid_loss)
                    best.save(self.out_dir / 'best.ckpt')
                else:
                    stale_rounds += 1
                    if stale_rounds >= config.patience:
                        LOGGER.info('No improvement in %d validations, stopping at step %d',
                                    stale_rounds, step)
                        break
            if step >= config.max_steps:
                break
        progress.close()

        self._write_log()
        last = self._checkpoint(step, best_valid_loss)
        last.save(self.out_dir / 'last.ckpt')
        return best or last


def train(config: TrainConfig, model_config: ModelConfig = None,
          show_progress: bool = False) -> ModelCheckpoint:
    ''' Split the prepared dataset in config.data_dir and train a model on it '''
    model_config = model_config or ModelConfig(max_len=config.max_len)
    sequences = load_dataset(config.data_dir)
    names = list(sequences)
    splits = split_dataset(names, config.split, config.seed)
    if not splits[0]:
        raise ConfigError(f'the train split of "{config.data_dir}" is empty')
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    write_split(config.out_dir, splits)
    LOGGER.info('Split %d songs into %d train, %d valid and %d test', len(names),
                *(len(split) for split in splits))

    trainer = Trainer(config, model_config, [sequences[name] for name in splits[0]],
                      [sequences[name] for name in splits[1]], show_progress=show_progress)
    return trainer.train()
