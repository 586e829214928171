from pathlib import Path
import sys

import pytest
import torch

sys.path.append(str(Path(__file__).parent.parent.parent))

# pylint: disable=wrong-import-position,no-name-in-module,import-error
from mmtoolkit.exceptions import (ConstraintConflictError, DegenerateDistributionError,
                                  PromptError)
from mmtoolkit.models.transformer import ModelConfig, MultitrackTransformer
from mmtoolkit.representation import (Event, EventSequence, EventType, Field, FieldVocab,
                                      check_grammar, encode)
from mmtoolkit.sampler import (GenerationMode, GenSpec, apply_monotonic_constraint,
                               continuation_prompt, generate, generate_many, instrument_prompt,
                               top_k, topk_mask, unconditioned_prompt)
from mmtoolkit.score import MusicScore, Note
from mmtoolkit.test.test_training import scale_song
from mmtoolkit.training import TrainConfig, Trainer


@pytest.fixture(scope='module')
def model():
    torch.manual_seed(0)
    network = MultitrackTransformer(ModelConfig(layers=1, model_dim=16, heads=2, max_len=48))
    network.eval()
    return network


def song() -> EventSequence:
    notes = [Note(12 * beat, 60 + beat % 12, 12, 0) for beat in range(8)]
    notes += [Note(12 * beat + 6, 48, 6, 40) for beat in range(8)]
    return encode(MusicScore(notes))


class TestTopK:
    def test_field_sizes(self):
        assert [top_k(size) for size in FieldVocab().sizes] == [1, 26, 2, 13, 3, 7]

    def test_keeps_highest_logits(self):
        logits = torch.tensor([3.0, 2.0, 1.0, 0.0, -1.0])
        probabilities = topk_mask(logits, 2)
        expected = torch.softmax(torch.tensor([3.0, 2.0]), dim=-1)
        assert torch.allclose(probabilities[:2], expected)
        assert torch.equal(probabilities[2:], torch.zeros(3))

    def test_k_larger_than_field(self):
        probabilities = topk_mask(torch.zeros(3), 10)
        assert torch.allclose(probabilities, torch.full((3,), 1 / 3))

    def test_raises_if_all_retained_are_impossible(self):
        logits = torch.tensor([float('-inf')] * 4)
        with pytest.raises(DegenerateDistributionError):
            topk_mask(logits, 2)

    def test_raises_if_k_not_positive(self):
        with pytest.raises(ValueError):
            topk_mask(torch.zeros(3), 0)


class TestMonotonicConstraint:
    def test_type_floor_removes_earlier_types(self):
        distribution = torch.full((5,), 0.2, dtype=torch.float64)
        constrained = apply_monotonic_constraint(distribution, Field.TYPE, 3)
        assert torch.equal(constrained[:3], torch.zeros(3, dtype=torch.float64))
        assert torch.allclose(constrained[3:], torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_zero_floor_is_identity(self):
        distribution = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
        assert torch.allclose(apply_monotonic_constraint(distribution, Field.TYPE, 0), distribution)

    def test_beat_floor_renormalizes(self):
        distribution = torch.tensor([0.0, 0.25, 0.25, 0.25, 0.25], dtype=torch.float64)
        constrained = apply_monotonic_constraint(distribution, Field.BEAT, 3)
        assert torch.allclose(constrained,
                              torch.tensor([0.0, 0.0, 0.0, 0.5, 0.5], dtype=torch.float64))

    @pytest.mark.parametrize('field', [Field.BEAT, Field.PITCH, Field.INSTRUMENT])
    def test_non_type_fields_never_keep_undefined_code(self, field):
        distribution = torch.full((4,), 0.25, dtype=torch.float64)
        constrained = apply_monotonic_constraint(distribution, field, 0)
        assert torch.allclose(constrained,
                              torch.tensor([0.0, 1 / 3, 1 / 3, 1 / 3], dtype=torch.float64))

    def test_raises_if_all_mass_removed(self):
        distribution = torch.tensor([0.5, 0.5, 0.0, 0.0], dtype=torch.float64)
        with pytest.raises(ConstraintConflictError):
            apply_monotonic_constraint(distribution, Field.TYPE, 2)


class TestPrompts:
    def test_unconditioned(self):
        assert unconditioned_prompt() == EventSequence([Event.start_of_song()])

    def test_instruments_are_sorted_and_unique(self):
        prompt = instrument_prompt([25, 1, 25])
        assert [event.type for event in prompt] == [0, 1, 1, 2]
        assert prompt.instruments() == [1, 25]

    def test_continuation_keeps_first_beats(self):
        prompt = continuation_prompt(song(), 4)
        assert [event.type for event in prompt][:4] == [0, 1, 1, 2]
        assert {event.beat for event in prompt.notes()} == {1, 2, 3, 4}
        assert EventType.END_OF_SONG not in [event.type for event in prompt]

    @pytest.mark.parametrize('label,mode', [
        ('unconditioned', GenerationMode.UNCONDITIONED),
        ('instrument-informed', GenerationMode.INSTRUMENTS),
        ('n_beat_continuation', GenerationMode.CONTINUATION),
        ('Continuation', GenerationMode.CONTINUATION),
    ])
    def test_mode_from_str(self, label, mode):
        assert GenerationMode.from_str(label) == mode


class TestGenerate:
    def test_unconditioned_output_is_grammatical(self, model):
        for seed in range(20):
            spec = GenSpec('unconditioned', unconditioned_prompt(), max_len=40, seed=seed)
            sequence = generate(model, spec)
            check_grammar(sequence)
            assert sequence[0] == Event.start_of_song()
            assert sequence[-1].type == EventType.END_OF_SONG or len(sequence) == 40

    def test_is_seeded(self, model):
        spec = GenSpec(GenerationMode.UNCONDITIONED, unconditioned_prompt(), max_len=30, seed=3)
        assert generate(model, spec) == generate(model, spec)

    def test_keeps_prompt(self, model):
        prompt = continuation_prompt(song(), 2)
        spec = GenSpec(GenerationMode.CONTINUATION, prompt, max_len=40, seed=1)
        sequence = generate(model, spec)
        assert sequence[:len(prompt)] == prompt
        check_grammar(sequence)

    def test_restricts_to_declared_instruments(self, model):
        spec = GenSpec(GenerationMode.INSTRUMENTS, instrument_prompt([1]), max_len=40, seed=0,
                       restrict_to_declared_instruments=True)
        for sequence in generate_many(model, spec, 5):
            assert sequence.instruments() == [1]
            assert {event.instrument for event in sequence.notes()} <= {1}

    def test_stops_after_max_beat(self, model):
        spec = GenSpec(GenerationMode.UNCONDITIONED, unconditioned_prompt(), max_len=48,
                       max_beat=1, seed=0)
        for sequence in generate_many(model, spec, 5):
            assert all(event.beat <= 1 for event in sequence.notes())
            check_grammar(sequence)

    def test_one_forward_pass_per_event(self, model):
        calls = []
        handle = model.register_forward_hook(lambda *_: calls.append(1))
        try:
            spec = GenSpec(GenerationMode.UNCONDITIONED, unconditioned_prompt(), max_len=24)
            sequence = generate(model, spec)
        finally:
            handle.remove()
        assert len(calls) == len(sequence) - 1

    def test_greedy_is_independent_of_seed(self, model):
        prompt = instrument_prompt([1, 25])
        first = generate(model, GenSpec('instruments', prompt, max_len=30, seed=0, greedy=True))
        second = generate(model, GenSpec('instruments', prompt, max_len=30, seed=9, greedy=True))
        assert first == second

    def test_generate_many_uses_consecutive_seeds(self, model):
        spec = GenSpec(GenerationMode.UNCONDITIONED, unconditioned_prompt(), max_len=20, seed=5)
        samples = list(generate_many(model, spec, 2))
        assert samples[1] == generate(model, GenSpec(spec.mode, spec.prompt, max_len=20, seed=6))

    @pytest.mark.parametrize('mode,prompt', [
        ('unconditioned', EventSequence([Event.start_of_song(), Event.start_of_notes()])),
        ('instruments', EventSequence([Event.start_of_song(), Event.for_instrument(1)])),
        ('instruments', EventSequence([Event.start_of_song(), Event.start_of_notes(),
                                       Event(3, 1, 1, 61, 8, 1)])),
        ('continuation', EventSequence([Event.start_of_song()])),
        ('continuation', EventSequence([Event.start_of_song(), Event.start_of_notes(),
                                        Event.end_of_song()])),
        ('unconditioned', EventSequence([Event.start_of_notes()])),
        ('continuation', EventSequence([Event.start_of_song(), Event.start_of_notes(),
                                        Event(3, 0, 1, 61, 8, 1)])),
    ])
    def test_raises_if_prompt_does_not_fit_mode(self, model, mode, prompt):
        with pytest.raises(PromptError):
            generate(model, GenSpec(mode, prompt, max_len=20))

    def test_raises_if_prompt_longer_than_max_len(self, model):
        with pytest.raises(PromptError):
            generate(model, GenSpec('continuation', song(), max_len=4))

    def test_generate_many_with_no_seeds_yields_nothing(self, model):
        spec = GenSpec(GenerationMode.UNCONDITIONED, unconditioned_prompt(), max_len=20)
        assert not list(generate_many(model, spec, 3, seeds=[]))

    def test_generate_many_uses_given_seeds(self, model):
        spec = GenSpec(GenerationMode.UNCONDITIONED, unconditioned_prompt(), max_len=20, seed=5)
        samples = list(generate_many(model, spec, 3, seeds=[7]))
        assert samples == [generate(model, GenSpec(spec.mode, spec.prompt, max_len=20, seed=7))]

    @pytest.mark.slow
    def test_trained_model_samples_are_grammatical(self, tmp_path):
        songs = [scale_song(index) for index in range(8)]
        config = TrainConfig(out_dir=str(tmp_path), max_len=32, batch_size=8, validate_every=50,
                             max_steps=300, patience=5, augment=False, seed=0)
        model_config = ModelConfig(layers=1, model_dim=32, heads=2, max_len=32, dropout=0.0)
        trained = Trainer(config, model_config, songs, songs).train().build_model()
        spec = GenSpec(GenerationMode.UNCONDITIONED, unconditioned_prompt(), max_len=32)
        for sequence in generate_many(trained, spec, 500):
            check_grammar(sequence, strict=True)
