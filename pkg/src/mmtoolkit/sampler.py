''' Constrained autoregressive decoding.

One full event is sampled per forward pass. The type field is sampled first; note events then
sample their five remaining fields independently from their own heads. Every field goes through

    softmax -> reserved-zero removal -> monotonic floor -> grammar restrictions -> top-k -> sample

so the output always satisfies the event grammar.
'''
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence
import logging
import math

import torch

from mmtoolkit.exceptions import (ConstraintConflictError, DegenerateDistributionError,
                                  GrammarError, PromptError)
from mmtoolkit.models.transformer import MultitrackTransformer
from mmtoolkit.representation import (MAX_BEAT, NOTE_FIELDS, Event, EventSequence, EventType,
                                      Field, check_grammar)


LOGGER = logging.getLogger(__name__)

TOP_K_FRACTION = 0.1

# Types that may follow each type, on top of the monotonic floor
NEXT_TYPES = {
    EventType.START_OF_SONG: (EventType.INSTRUMENT, EventType.START_OF_NOTES),
    EventType.INSTRUMENT: (EventType.INSTRUMENT, EventType.START_OF_NOTES),
    EventType.START_OF_NOTES: (EventType.NOTE, EventType.END_OF_SONG),
    EventType.NOTE: (EventType.NOTE, EventType.END_OF_SONG),
    EventType.END_OF_SONG: (),
}


class GenerationMode(Enum):
    UNCONDITIONED = 'unconditioned'
    INSTRUMENTS = 'instruments'
    CONTINUATION = 'continuation'

    @staticmethod
    def from_str(label: str):
        clean_label = label.strip().lower().replace('_', '-')
        aliases = {'instrument-informed': 'instruments', 'n-beat-continuation': 'continuation'}
        clean_label = aliases.get(clean_label, clean_label)
        for mode in GenerationMode:
            if mode.value == clean_label:
                return mode
        raise ValueError(f'Could not parse generation mode from "{label}"')


@dataclass
class GenSpec:
    mode: GenerationMode
    prompt: EventSequence
    max_len: int = 1024
    max_beat: int = MAX_BEAT
    seed: int = 0
    restrict_to_declared_instruments: bool = False
    greedy: bool = False
    top_k_fraction: float = TOP_K_FRACTION

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = GenerationMode.from_str(self.mode)


def unconditioned_prompt() -> EventSequence:
    return EventSequence([Event.start_of_song()])


def instrument_prompt(instrument_codes: Iterable[int]) -> EventSequence:
    ''' Start-of-song, one instrument event per (1-based) instrument code, start-of-notes '''
    events = [Event.start_of_song()]
    events.extend(Event.for_instrument(code) for code in sorted(set(instrument_codes)))
    events.append(Event.start_of_notes())
    return EventSequence(events)


def continuation_prompt(sequence: EventSequence, n_beats: int) -> EventSequence:
    ''' The header of a sequence plus all of its note events within the first n_beats beats '''
    events = [event for event in sequence
              if event.type < EventType.NOTE
              or (event.type == EventType.NOTE and event.beat <= n_beats)]
    return EventSequence(events)


def top_k(field_size: int, fraction: float = TOP_K_FRACTION) -> int:
    return max(1, math.ceil(fraction * field_size))


def topk_mask(logits: torch.Tensor, k: int) -> torch.Tensor:
    ''' Softmax over the k highest logits; every other outcome gets probability 0 '''
    if k < 1:
        raise ValueError(f'k must be at least 1, got {k}')
    k = min(k, logits.shape[-1])
    values, indices = torch.topk(logits, k)
    if torch.isneginf(values).all():
        raise DegenerateDistributionError('every retained logit is -inf')
    filtered = torch.full_like(logits, float('-inf'))
    filtered[indices] = values
    return torch.softmax(filtered, dim=-1)


def _restrict(distribution: torch.Tensor, allowed: torch.Tensor, reason: str) -> torch.Tensor:
    restricted = torch.where(allowed, distribution, torch.zeros_like(distribution))
    total = restricted.sum()
    if not total > 0:
        raise ConstraintConflictError(f'{reason} removed all probability mass')
    return restricted / total


def apply_monotonic_constraint(distribution: torch.Tensor, field: Field,
                               floor: int) -> torch.Tensor:
    ''' Zero the probability of every code below floor and renormalize.

    Event types may fall to code 0 (start of song); every other field keeps code 0 for undefined
    values, so its floor is at least 1.
    '''
    field = Field(field)
    if field != Field.TYPE:
        floor = max(floor, 1)
    codes = torch.arange(distribution.shape[-1], device=distribution.device)
    return _restrict(distribution, codes >= floor, f'monotonic {field.name.lower()} floor {floor}')


class _FieldSampler:
    def __init__(self, spec: GenSpec, vocab_sizes: Sequence[int]):
        self.spec = spec
        self.generator = torch.Generator().manual_seed(spec.seed)
        self.k = [top_k(size, spec.top_k_fraction) for size in vocab_sizes]

    def draw(self, distribution: torch.Tensor, field: Field) -> int:
        log_probs = torch.log(distribution)
        if self.spec.greedy:
            return int(torch.argmax(log_probs))
        probs = topk_mask(log_probs, self.k[field])
        return int(torch.multinomial(probs, 1, generator=self.generator))


def _check_prompt(spec: GenSpec):
    prompt = spec.prompt
    try:
        check_grammar(prompt, strict=True, complete=False)
    except GrammarError as exc:
        raise PromptError(f'prompt is not grammatical: {exc}') from exc
    types = [event.type for event in prompt]
    if EventType.END_OF_SONG in types:
        raise PromptError('prompt must not contain end-of-song')
    if spec.mode == GenerationMode.UNCONDITIONED and types != [EventType.START_OF_SONG]:
        raise PromptError('unconditioned prompts hold exactly one start-of-song event')
    if spec.mode == GenerationMode.INSTRUMENTS and (
            types[-1] != EventType.START_OF_NOTES or EventType.NOTE in types):
        raise PromptError('instrument-informed prompts end with start-of-notes and hold no notes')
    if spec.mode == GenerationMode.CONTINUATION and EventType.START_OF_NOTES not in types:
        raise PromptError('continuation prompts hold a full header')
    if spec.max_len < len(prompt):
        raise PromptError(f'max_len {spec.max_len} is shorter than the prompt ({len(prompt)})')


@torch.no_grad()
def generate(model: MultitrackTransformer, spec: GenSpec) -> EventSequence:
    ''' Sample a sequence from a prompt.

    Decoding stops when end-of-song is sampled, when the sequence reaches spec.max_len events,
    or when a note lands after spec.max_beat (that note is replaced by end-of-song).

    Args:
        model (MultitrackTransformer): The network, used in eval mode
        spec (GenSpec): Mode, prompt and decoding options

    Returns:
        (EventSequence): The prompt followed by the generated events
    '''
    _check_prompt(spec)
    model.eval()
    vocab_sizes = model.config.vocab.sizes
    max_len = min(spec.max_len, model.config.max_len)
    sampler = _FieldSampler(spec, vocab_sizes)

    events = list(spec.prompt)
    declared = spec.prompt.instruments()
    notes = [event for event in events if event.is_note]
    beat_floor = max((event.beat for event in notes), default=1)
    last_instrument = max(declared, default=0)
    device = next(model.parameters()).device

    while len(events) < max_len and events[-1].type != EventType.END_OF_SONG:
        codes = torch.tensor([events], dtype=torch.long, device=device)
        logits = [field_logits[0, -1].double().cpu() for field_logits in model(codes)]
        distributions = [torch.softmax(field_logits, dim=-1) for field_logits in logits]

        previous_type = EventType(events[-1].type)
        allowed_types = list(NEXT_TYPES[previous_type])
        if last_instrument >= vocab_sizes[Field.INSTRUMENT] - 1:
            allowed_types = [code for code in allowed_types if code != EventType.INSTRUMENT]
        type_distribution = apply_monotonic_constraint(distributions[Field.TYPE], Field.TYPE,
                                                       int(previous_type))
        type_distribution = _restrict(
            type_distribution, _code_mask(vocab_sizes[Field.TYPE], allowed_types),
            f'event grammar after {previous_type.name.lower()}')
        event_type = sampler.draw(type_distribution, Field.TYPE)

        if event_type == EventType.INSTRUMENT:
            instrument_distribution = apply_monotonic_constraint(
                distributions[Field.INSTRUMENT], Field.INSTRUMENT, last_instrument + 1)
            last_instrument = sampler.draw(instrument_distribution, Field.INSTRUMENT)
            events.append(Event.for_instrument(last_instrument))
            declared.append(last_instrument)
        elif event_type == EventType.NOTE:
            event = _sample_note(distributions, sampler, beat_floor, declared, spec)
            if event.beat > spec.max_beat:
                LOGGER.debug('Stopping at beat code %d (max_beat %d)', event.beat, spec.max_beat)
                events.append(Event.end_of_song())
                break
            beat_floor = event.beat
            events.append(event)
        else:
            events.append(Event(event_type))
    return EventSequence(events)


def _code_mask(size: int, codes: Iterable[int]) -> torch.Tensor:
    mask = torch.zeros(size, dtype=torch.bool)
    mask[[int(code) for code in codes]] = True
    return mask


def _sample_note(distributions, sampler: _FieldSampler, beat_floor: int, declared,
                 spec: GenSpec) -> Event:
    values = [int(EventType.NOTE)]
    for note_field in NOTE_FIELDS:
        floor = beat_floor if note_field == Field.BEAT else 1
        distribution = apply_monotonic_constraint(distributions[note_field], note_field, floor)
        if note_field == Field.INSTRUMENT and spec.restrict_to_declared_instruments and declared:
            distribution = _restrict(distribution, _code_mask(len(distribution), declared),
                                     'declared instrument restriction')
        values.append(sampler.draw(distribution, note_field))
    return Event(*values)


def generate_many(model: MultitrackTransformer, spec: GenSpec, n_samples: int,
                  seeds: Optional[Sequence[int]] = None):
    ''' Generate n_samples sequences, seeding sample i with spec.seed + i unless seeds are given '''
    if seeds is None:
        seeds = [spec.seed + index for index in range(n_samples)]
    for seed in seeds:
        sample_spec = GenSpec(**{**spec.__dict__, 'seed': seed})
        yield generate(model, sample_spec)
