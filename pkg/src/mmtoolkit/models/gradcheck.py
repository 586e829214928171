''' Finite-difference check of the model's analytic gradients.

Every parameter entry is nudged by +/- step and the central difference of the loss is compared
against the gradient autograd computed for it. The check runs in double precision with dropout
disabled.
'''
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional
import logging

import numpy as np
import torch

from mmtoolkit.models.transformer import ModelConfig, MultitrackTransformer, sequence_loss
from mmtoolkit.representation import EventType, Field


LOGGER = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_array(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    @property
    def failed_arrays(self):
        return [name for name, error in self.errors.items() if not error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed_arrays

    def __str__(self):
        lines = [f'{name}\t{error:.3e}' for name, error in self.errors.items()]
        verdict = 'PASS' if self.passed else f'FAIL ({", ".join(self.failed_arrays)})'
        lines.append(f'max relative error {self.max_error:.3e} (tolerance {self.tolerance:.0e}): '
                     f'{verdict}')
        return '\n'.join(lines)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    difference = torch.linalg.norm(analytic - numeric).item()
    scale = torch.linalg.norm(analytic).item() + torch.linalg.norm(numeric).item()
    return difference / max(scale, 1e-12)


def random_batch(config: ModelConfig, batch_size: int, length: int,
                 generator: torch.Generator):
    ''' Random codes in which most events are notes, with the tail of the last row padded '''
    sizes = config.vocab.sizes
    codes = torch.stack([torch.randint(1, size, (batch_size, length), generator=generator)
                         for size in sizes], dim=-1)
    types = torch.full((batch_size, length), int(EventType.NOTE))
    types[:, 0] = int(EventType.START_OF_SONG)
    types[:, 1] = int(EventType.INSTRUMENT)
    types[:, 2] = int(EventType.START_OF_NOTES)
    codes[..., int(Field.TYPE)] = types
    mask = torch.ones((batch_size, length), dtype=torch.bool)
    if batch_size > 1:
        mask[-1, length // 2 + 1:] = False
        codes[-1, length // 2 + 1:] = 0
    return codes, mask


def grad_check(config: ModelConfig, tolerance: float = 1e-4, seed: int = 0, step: float = 1e-5,
               batch_size: int = 2, length: int = None, arrays: Iterable[str] = None,
               max_entries: int = None,
               tamper: Callable[[str, torch.Tensor], torch.Tensor] = None) -> GradCheckReport:
    ''' Compare analytic gradients of the loss against central finite differences.

    Args:
        config (ModelConfig): A small architecture to check
        tolerance (float): Largest acceptable relative error per array
        seed (int): Seeds parameter initialization, the batch and entry sampling
        step (float): Finite-difference step
        batch_size (int): Rows in the random batch
        length (int): Events per row, defaults to min(max_len, 8)
        arrays (Iterable[str]): Names of the parameter arrays to check, every array if None
        max_entries (int): Check at most this many randomly chosen entries per array
        tamper (Callable[[str, torch.Tensor], torch.Tensor]): Rewrites an analytic gradient
        before comparison

    Returns:
        (GradCheckReport): The relative error of every checked array
    '''
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    length = length or min(config.max_len, 8)

    model = MultitrackTransformer(config).double()
    model.eval()
    codes, mask = random_batch(config, batch_size, length + 1, generator)
    inputs, targets, target_mask = codes[:, :-1], codes[:, 1:], mask[:, 1:]

    def compute_loss() -> torch.Tensor:
        return sequence_loss(model(inputs, mask[:, :-1]), targets, target_mask)

    parameters = dict(model.named_parameters())
    selected = list(parameters) if arrays is None else list(arrays)

    model.zero_grad()
    compute_loss().backward()
    errors = {}
    with torch.no_grad():
        for name in selected:
            parameter = parameters[name]
            analytic = parameter.grad if parameter.grad is not None else \
                torch.zeros_like(parameter)
            if tamper is not None:
                analytic = tamper(name, analytic.clone())
            flat = parameter.view(-1)
            indices = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                indices = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))

            numeric = torch.zeros(len(indices), dtype=torch.float64)
            for position, index in enumerate(indices):
                original = flat[index].item()
                flat[index] = original + step
                plus = compute_loss().item()
                flat[index] = original - step
                minus = compute_loss().item()
                flat[index] = original
                numeric[position] = (plus - minus) / (2 * step)

            errors[name] = relative_error(analytic.reshape(-1)[torch.from_numpy(indices)],
                                          numeric)
            LOGGER.debug('%s: relative error %.3e over %d entries', name, errors[name],
                         len(indices))
    return GradCheckReport(errors, tolerance)
