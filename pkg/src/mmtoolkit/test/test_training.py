from pathlib import Path
import csv
import sys

import pytest
import torch

sys.path.append(str(Path(__file__).parent.parent.parent))

# pylint: disable=wrong-import-position,no-name-in-module,import-error
from mmtoolkit import training
from mmtoolkit.exceptions import ConfigError, TrainingError
from mmtoolkit.instruments import InstrumentMap
from mmtoolkit.models.checkpoint import ModelCheckpoint
from mmtoolkit.models.transformer import ModelConfig
from mmtoolkit.representation import Event, EventSequence, EventType, check_grammar, encode
from mmtoolkit.sampler import GenerationMode, GenSpec, continuation_prompt, generate
from mmtoolkit.score import MusicScore, Note, save_midi
from mmtoolkit.training import (TrainConfig, Trainer, augment, convert_dataset, load_dataset,
                                make_example, read_manifest, split_dataset, train)


C_MAJOR = (0, 2, 4, 5, 7, 9, 11, 12)
SOS = (0, 0, 0, 0, 0, 0)
SON = (2, 0, 0, 0, 0, 0)
EOS = (4, 0, 0, 0, 0, 0)


def note(beat, pitch=61, instrument=1):
    return (3, beat, 1, pitch, 8, instrument)


def scale_song(index: int) -> EventSequence:
    ''' An ascending and a descending C major scale on two instruments unique to the song '''
    instrument_map = InstrumentMap.default()
    low, high = (instrument_map.representative_program(2 * index + offset) for offset in (0, 1))
    notes = [Note(12 * beat, 60 + C_MAJOR[beat], 12, high) for beat in range(8)]
    notes += [Note(12 * beat, 48 + C_MAJOR[7 - beat], 12, low) for beat in range(8)]
    return encode(MusicScore(notes))


def small_model_config(**kwargs) -> ModelConfig:
    values = dict(layers=1, model_dim=16, heads=2, max_len=32)
    values.update(kwargs)
    return ModelConfig(**values)


class TestTrainConfig:
    def test_defaults(self):
        config = TrainConfig()
        assert config.split == (0.8, 0.1, 0.1)
        assert (config.max_len, config.max_beat, config.validate_every) == (1024, 256, 1000)
        assert (config.max_steps, config.patience, config.batch_size) == (200000, 20, 4)

    @pytest.mark.parametrize('values', [
        {'split': (0.8, 0.1, 0.2)},
        {'split': (0.9, 0.1)},
        {'split': (1.2, -0.1, -0.1)},
        {'patience': 0},
        {'batch_size': 0},
        {'max_beat': 257},
    ])
    def test_raises_if_invalid(self, values):
        with pytest.raises(ConfigError):
            TrainConfig(**values)

    def test_split_from_list(self):
        assert TrainConfig(split=[0.5, 0.25, 0.25]).split == (0.5, 0.25, 0.25)


class TestAugment:
    def test_identity_without_shift_from_first_beat(self):
        sequence = scale_song(0)
        assert augment(sequence, 0, shift=0, origin=1) == sequence

    def test_drops_notes_shifted_out_of_range(self):
        sequence = EventSequence([SOS, (1, 0, 0, 0, 0, 1), SON, note(1, pitch=128),
                                  note(1, pitch=100), EOS])
        augmented = augment(sequence, 0, shift=6, origin=1)
        assert [event.pitch for event in augmented.notes()] == [106]

    def test_rebases_beats_at_origin(self):
        sequence = EventSequence([SOS, SON, note(1), note(5), note(9), EOS])
        augmented = augment(sequence, 0, shift=0, origin=5)
        assert [event.beat for event in augmented.notes()] == [1, 5]

    def test_keeps_header(self):
        sequence = scale_song(1)
        augmented = augment(sequence, 3)
        assert augmented.instruments() == sequence.instruments()
        assert augmented[-1] == Event.end_of_song()

    def test_passes_empty_note_list_through(self):
        sequence = EventSequence([SOS, SON, EOS])
        assert augment(sequence, 0) == sequence

    def test_is_grammatical_and_in_range(self):
        sequence = scale_song(2)
        for seed in range(50):
            augmented = augment(sequence, seed)
            check_grammar(augmented)
            assert all(1 <= event.pitch <= 128 for event in augmented.notes())
            assert augmented.notes()[0].beat == 1

    def test_is_seeded(self):
        sequence = scale_song(3)
        assert augment(sequence, 11) == augment(sequence, 11)


class TestMakeExample:
    def test_pads_short_sequence(self):
        sequence = EventSequence([SOS, SON, note(1), note(2), EOS])
        example = make_example(sequence, max_len=8)
        assert tuple(example.inputs.shape) == (7, 6)
        assert int(example.input_mask.sum()) == 5
        assert int(example.target_mask.sum()) == 4
        assert torch.equal(example.inputs[5:], torch.zeros((2, 6), dtype=torch.long))
        assert torch.equal(example.targets[:4], example.inputs[1:5])

    def test_truncates_long_sequence(self):
        sequence = EventSequence([SOS, SON] + [note(1 + index // 10) for index in range(1997)]
                                 + [EOS])
        example = make_example(sequence, max_len=1024)
        assert int(example.input_mask.sum()) + 1 == 1024
        assert int(example.targets[-1, 0]) == EventType.END_OF_SONG

    def test_drops_notes_after_max_beat(self):
        sequence = EventSequence([SOS, SON, note(1), note(300), EOS])
        example = make_example(sequence, max_len=8)
        assert int(example.input_mask.sum()) == 4
        assert 300 not in example.inputs[:, 1].tolist()

    def test_skips_too_short_sequence(self):
        assert make_example(EventSequence([SOS]), max_len=8) is None


class TestSplitDataset:
    def test_is_seeded(self):
        names = [f'song{index}.csv' for index in range(50)]
        assert split_dataset(names, seed=4) == split_dataset(names, seed=4)
        assert split_dataset(names, seed=4) != split_dataset(names, seed=5)

    def test_sizes_and_partition(self):
        names = [f'song{index}.csv' for index in range(100)]
        train_names, valid_names, test_names = split_dataset(names, (0.8, 0.1, 0.1), seed=0)
        assert (len(train_names), len(valid_names), len(test_names)) == (80, 10, 10)
        assert sorted(train_names + valid_names + test_names) == sorted(names)


class TestConvertDataset:
    def test_converts_and_skips_broken_files(self, tmp_path):
        midi_dir = tmp_path / 'midi'
        midi_dir.mkdir()
        save_midi(MusicScore([Note(0, 60, 12), Note(12, 64, 12, 40)]), midi_dir / 'a.mid')
        save_midi(MusicScore([Note(0, 67, 24)]), midi_dir / 'b.mid')
        (midi_dir / 'broken.mid').write_bytes(b'garbage')
        save_midi(MusicScore([]), midi_dir / 'empty.mid')
        paths = sorted(midi_dir.iterdir())

        names = convert_dataset(paths, tmp_path / 'data', workers=2)
        assert names == ['a.csv', 'b.csv']
        assert read_manifest(tmp_path / 'data') == names
        sequences = load_dataset(tmp_path / 'data')
        assert len(sequences['a.csv'].notes()) == 2

    def test_trims_late_notes(self, tmp_path):
        save_midi(MusicScore([Note(0, 60, 12), Note(12 * 300, 62, 12)]), tmp_path / 'long.mid')
        convert_dataset([tmp_path / 'long.mid'], tmp_path / 'data')
        sequence = EventSequence.read_csv(tmp_path / 'data' / 'long.csv')
        assert len(sequence.notes()) == 1

    def test_load_skips_ungrammatical(self, tmp_path):
        EventSequence([SOS, SON, EOS]).write_csv(tmp_path / 'good.csv')
        EventSequence([SON, EOS]).write_csv(tmp_path / 'bad.csv')
        (tmp_path / 'manifest.txt').write_text('good.csv\nbad.csv\n')
        assert list(load_dataset(tmp_path)) == ['good.csv']


class TestTrainer:
    def test_raises_if_train_split_empty(self, tmp_path):
        with pytest.raises(ConfigError):
            Trainer(TrainConfig(out_dir=str(tmp_path), max_len=32), small_model_config(), [])

    def test_stops_when_validation_stalls(self, tmp_path):
        config = TrainConfig(out_dir=str(tmp_path), max_len=32, learning_rate=0.0,
                             validate_every=5, max_steps=100, patience=1, augment=False)
        trainer = Trainer(config, small_model_config(), [scale_song(0), scale_song(1)])
        trainer.train()
        assert [entry.step for entry in trainer.history] == [5, 10]
        assert ModelCheckpoint.load(tmp_path / 'last.ckpt').state.step == 10

    def test_writes_log_and_checkpoints(self, tmp_path):
        config = TrainConfig(out_dir=str(tmp_path), max_len=32, batch_size=2, validate_every=4,
                             max_steps=12, warmup_steps=2)
        best = Trainer(config, small_model_config(), [scale_song(index) for index in range(4)],
                       [scale_song(4)]).train()
        with open(tmp_path / 'train_log.csv', newline='') as file_handle:
            rows = list(csv.reader(file_handle))
        assert rows[0] == ['step', 'train_loss', 'valid_loss']
        assert [row[0] for row in rows[1:]] == ['4', '8', '12']
        valid_losses = [float(row[2]) for row in rows[1:]]
        assert best.state.best_valid_loss == pytest.approx(min(valid_losses), abs=1e-6)
        saved = ModelCheckpoint.load(tmp_path / 'best.ckpt')
        assert saved.state.best_valid_loss <= min(valid_losses) + 1e-6
        assert (tmp_path / 'last.ckpt').exists()

    def test_same_seed_same_log(self, tmp_path):
        logs = []
        for run in ('first', 'second'):
            config = TrainConfig(out_dir=str(tmp_path / run), max_len=32, batch_size=2,
                                 validate_every=3, max_steps=9, seed=7)
            Trainer(config, small_model_config(), [scale_song(index) for index in range(4)],
                    [scale_song(5)]).train()
            logs.append((tmp_path / run / 'train_log.csv').read_bytes())
        assert logs[0] == logs[1]

    def test_non_finite_loss_aborts_with_diagnostic(self, tmp_path, monkeypatch):
        monkeypatch.setattr(training, 'sequence_loss',
                            lambda *_: torch.tensor(float('nan'), requires_grad=True))
        config = TrainConfig(out_dir=str(tmp_path), max_len=32, max_steps=5)
        trainer = Trainer(config, small_model_config(), [scale_song(0)])
        with pytest.raises(TrainingError) as exc_info:
            trainer.train()
        assert Path(exc_info.value.checkpoint_path) == tmp_path / 'diagnostic.ckpt'
        assert (tmp_path / 'diagnostic.ckpt').exists()


class TestTrain:
    def test_splits_prepared_dataset(self, tmp_path):
        data_dir = tmp_path / 'data'
        data_dir.mkdir()
        names = [f'song{index}.csv' for index in range(10)]
        for index, name in enumerate(names):
            scale_song(index).write_csv(data_dir / name)
        (data_dir / 'manifest.txt').write_text(''.join(f'{name}\n' for name in names))

        config = TrainConfig(data_dir=str(data_dir), out_dir=str(tmp_path / 'run'), max_len=32,
                             validate_every=2, max_steps=2)
        checkpoint = train(config, small_model_config())
        assert checkpoint.state.step == 2
        splits = [(tmp_path / 'run' / f'{split}.txt').read_text().split()
                  for split in ('train', 'valid', 'test')]
        assert [len(split) for split in splits] == [8, 1, 1]
        assert sorted(sum(splits, [])) == sorted(names)

    def test_raises_if_dataset_empty(self, tmp_path):
        (tmp_path / 'manifest.txt').write_text('')
        with pytest.raises(ConfigError):
            train(TrainConfig(data_dir=str(tmp_path), out_dir=str(tmp_path / 'run')))


@pytest.mark.slow
class TestMemorization:
    def test_memorizes_scales(self, tmp_path):
        songs = [scale_song(index) for index in range(8)]
        config = TrainConfig(out_dir=str(tmp_path), max_len=32, batch_size=8, validate_every=100,
                             max_steps=2000, patience=20, augment=False, seed=0)
        model_config = ModelConfig(layers=2, model_dim=64, heads=4, max_len=32, dropout=0.0)
        trainer = Trainer(config, model_config, songs, songs)
        best = trainer.train()
        per_field = [entry.valid_loss / 6 for entry in trainer.history]
        assert min(per_field) < 0.1

        model = best.build_model()
        for song in songs:
            prompt = continuation_prompt(song, 4)
            spec = GenSpec(GenerationMode.CONTINUATION, prompt, max_len=len(prompt) + 8,
                           greedy=True)
            continued = generate(model, spec)
            assert continued[len(prompt):] == song[len(prompt):len(prompt) + 8]
