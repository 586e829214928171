''' Decoder-only transformer with six summed input embeddings and six output heads.

Each event is embedded as the sum of one embedding per field plus a learned absolute positional
embedding. The final hidden state at position i feeds six independent linear heads that predict
the fields of event i + 1.
'''
from dataclasses import asdict, dataclass, field
from typing import List, Optional
import math

import torch
import torch.nn.functional as F
from torch import nn

from mmtoolkit.exceptions import ConfigError, ContractError, DomainError, LengthError
from mmtoolkit.representation import FIELD_NAMES, EventType, Field, FieldVocab


@dataclass
class ModelConfig:
    ''' Architecture of the network. Defaults are the desk-scale model; the full-scale model
    uses layers=6, model_dim=512 and heads=8.
    '''
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    feedforward_dim: Optional[int] = None
    max_len: int = 1024
    vocab: FieldVocab = field(default_factory=FieldVocab)
    dropout: float = 0.1

    def __post_init__(self):
        if isinstance(self.vocab, dict):
            self.vocab = FieldVocab(**self.vocab)
        if self.feedforward_dim is None:
            self.feedforward_dim = 4 * self.model_dim
        if self.model_dim % self.heads:
            raise ConfigError(f'model_dim {self.model_dim} is not divisible by {self.heads} heads')
        if self.max_len < 2:
            raise ConfigError(f'max_len must be at least 2, got {self.max_len}')
        if not 0 <= self.dropout < 1:
            raise ConfigError(f'dropout must lie in [0, 1), got {self.dropout}')

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> 'ModelConfig':
        return cls(**values)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.qkv = nn.Linear(config.model_dim, 3 * config.model_dim)
        self.proj = nn.Linear(config.model_dim, config.model_dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, hidden: torch.Tensor, key_mask: torch.Tensor):
        batch, length, dim = hidden.shape
        head_dim = dim // self.heads
        query, key, value = self.qkv(hidden).split(dim, dim=-1)
        query, key, value = (
            tensor.view(batch, length, self.heads, head_dim).transpose(1, 2)
            for tensor in (query, key, value)
        )
        scores = query @ key.transpose(-2, -1) / math.sqrt(head_dim)

        causal = torch.ones(length, length, dtype=torch.bool, device=hidden.device).tril()
        diagonal = torch.eye(length, dtype=torch.bool, device=hidden.device)
        # Every row keeps its diagonal, so padded queries never see an empty row
        allowed = causal & (key_mask[:, None, None, :] | diagonal)
        weights = scores.masked_fill(~allowed, float('-inf')).softmax(dim=-1)

        output = (self.dropout(weights) @ value).transpose(1, 2).reshape(batch, length, dim)
        return self.proj(output), weights


class DecoderBlock(nn.Module):
    ''' Pre-normalization residual block '''
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attention_norm = nn.LayerNorm(config.model_dim)
        self.attention = CausalSelfAttention(config)
        self.feedforward_norm = nn.LayerNorm(config.model_dim)
        self.feedforward = nn.Sequential(
            nn.Linear(config.model_dim, config.feedforward_dim),
            nn.GELU(),
            nn.Linear(config.feedforward_dim, config.model_dim),
        )
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, hidden: torch.Tensor, key_mask: torch.Tensor):
        attended, weights = self.attention(self.attention_norm(hidden), key_mask)
        hidden = hidden + self.dropout(attended)
        hidden = hidden + self.dropout(self.feedforward(self.feedforward_norm(hidden)))
        return hidden, weights


class MultitrackTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        sizes = config.vocab.sizes
        self.field_embeddings = nn.ModuleList(
            [nn.Embedding(size, config.model_dim) for size in sizes])
        self.positional_embedding = nn.Embedding(config.max_len, config.model_dim)
        self.embedding_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList([DecoderBlock(config) for _ in range(config.layers)])
        self.norm = nn.LayerNorm(config.model_dim)
        self.field_heads = nn.ModuleList(
            [nn.Linear(config.model_dim, size) for size in sizes])
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)

    def embed(self, codes: torch.Tensor) -> torch.Tensor:
        ''' Sum of the six field embeddings plus the positional embedding.

        Args:
            codes (torch.Tensor): Integer codes of shape (batch, n, 6) or (n, 6)

        Returns:
            (torch.Tensor): Hidden states of shape (..., n, model_dim)
        '''
        if codes.shape[-1] != len(FIELD_NAMES):
            raise ContractError(f'events need {len(FIELD_NAMES)} fields, got {codes.shape[-1]}')
        length = codes.shape[-2]
        if length > self.config.max_len:
            raise LengthError(f'sequence of length {length} exceeds max_len '
                              f'{self.config.max_len}')
        for index, size in enumerate(self.config.vocab.sizes):
            column = codes[..., index]
            if column.numel() and (column.min() < 0 or column.max() >= size):
                raise DomainError(f'{FIELD_NAMES[index]} codes must lie in 0-{size - 1}')

        hidden = sum(embedding(codes[..., index])
                     for index, embedding in enumerate(self.field_embeddings))
        positions = torch.arange(length, device=codes.device)
        return hidden + self.positional_embedding(positions)

    def forward(self, codes: torch.Tensor, mask: torch.Tensor = None,
                return_attention: bool = False):
        ''' Predict the six fields of the next event at every position.

        Args:
            codes (torch.Tensor): Integer codes of shape (batch, n, 6), padded with zero events
            mask (torch.Tensor): Boolean (batch, n), True on real events. All real if None.
            return_attention (bool): Also return the attention weights of every layer

        Returns:
            (list): Six logit tensors of shape (batch, n, field size), and when return_attention
            is set, a list of (batch, heads, n, n) attention weights per layer
        '''
        if codes.dim() != 3:
            raise ContractError(f'expected codes of shape (batch, n, 6), got {tuple(codes.shape)}')
        if mask is None:
            mask = torch.ones(codes.shape[:2], dtype=torch.bool, device=codes.device)
        elif tuple(mask.shape) != tuple(codes.shape[:2]):
            raise ContractError(f'mask shape {tuple(mask.shape)} does not match codes shape '
                                f'{tuple(codes.shape[:2])}')

        hidden = self.embedding_dropout(self.embed(codes))
        attentions = []
        for block in self.blocks:
            hidden, weights = block(hidden, mask.bool())
            attentions.append(weights)
        hidden = self.norm(hidden)
        logits = [head(hidden) for head in self.field_heads]
        if return_attention:
            return logits, attentions
        return logits


def field_losses(logits: List[torch.Tensor], targets: torch.Tensor,
                 mask: torch.Tensor) -> List[Optional[torch.Tensor]]:
    ''' Mean cross entropy of each field over its unmasked target positions.

    The type field is trained on every unmasked target, the instrument field on instrument and
    note targets, and the remaining fields on note targets only. A field without any target
    position yields None.
    '''
    mask = mask.bool()
    if not mask.any():
        raise DomainError('the loss mask does not select any position')
    target_types = targets[..., int(Field.TYPE)]
    is_note = target_types == int(EventType.NOTE)
    field_masks = {
        Field.TYPE: mask,
        # Instrument declarations carry their code in the instrument field, so they train the
        # instrument head along with notes
        Field.INSTRUMENT: mask & (is_note | (target_types == int(EventType.INSTRUMENT))),
    }
    losses = []
    for index, field_logits in enumerate(logits):
        field_mask = field_masks.get(index, mask & is_note)
        if not field_mask.any():
            losses.append(None)
            continue
        losses.append(F.cross_entropy(field_logits[field_mask], targets[..., index][field_mask]))
    return losses


def sequence_loss(logits: List[torch.Tensor], targets: torch.Tensor,
                  mask: torch.Tensor) -> torch.Tensor:
    ''' Sum over the six fields of the per-field mean cross entropy '''
    losses = [loss for loss in field_losses(logits, targets, mask) if loss is not None]
    return torch.stack(losses).sum()
