''' Named-array container and model checkpoints.

A container file is laid out as

    MAGIC (8 bytes) | header length (8 bytes, little endian) | JSON header | array data

The JSON header holds the caller's metadata, the format version and a manifest listing the name,
shape and byte offset of every array. Arrays follow in manifest order as raw little-endian 32-bit
floats, so float32 parameters round-trip bit-exactly.
'''
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union
import json
import logging

import numpy as np
import torch

from mmtoolkit.exceptions import ContractError, DomainError
from mmtoolkit.models.transformer import ModelConfig, MultitrackTransformer


LOGGER = logging.getLogger(__name__)

MAGIC = b'MMTCKPT\n'
FORMAT_VERSION = 1
ARRAY_DTYPE = np.dtype('<f4')


def write_container(path: Union[str, Path], header: dict, arrays: Dict[str, np.ndarray]):
    ''' Write named arrays and a JSON-serializable header to a container file '''
    manifest = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        blob = np.ascontiguousarray(array, dtype=ARRAY_DTYPE).tobytes()
        manifest.append({'name': name, 'shape': list(np.shape(array)), 'offset': offset})
        blobs.append(blob)
        offset += len(blob)
    full_header = dict(header, format_version=FORMAT_VERSION, arrays=manifest)
    header_bytes = json.dumps(full_header, sort_keys=True, indent=1).encode('utf-8')
    with open(path, 'wb') as file_handle:
        file_handle.write(MAGIC)
        file_handle.write(len(header_bytes).to_bytes(8, 'little'))
        file_handle.write(header_bytes)
        for blob in blobs:
            file_handle.write(blob)


def read_container(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    ''' Read a container file.

    Returns:
        (tuple): The header dict (manifest included) and the arrays by name, in manifest order
    '''
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise DomainError(f'"{path}" is not a checkpoint container')
    header_start = len(MAGIC) + 8
    header_length = int.from_bytes(data[len(MAGIC):header_start], 'little')
    header = json.loads(data[header_start:header_start + header_length].decode('utf-8'))
    if header.get('format_version') != FORMAT_VERSION:
        raise DomainError(f'"{path}" has unsupported format version '
                          f'{header.get("format_version")}')

    base = header_start + header_length
    arrays = {}
    for entry in header['arrays']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        start = base + entry['offset']
        if start + count * ARRAY_DTYPE.itemsize > len(data):
            raise DomainError(f'array "{entry["name"]}" runs past the end of "{path}"')
        arrays[entry['name']] = np.frombuffer(data, dtype=ARRAY_DTYPE, count=count,
                                              offset=start).reshape(shape).copy()
    return header, arrays


@dataclass
class TrainingState:
    step: int = 0
    best_valid_loss: Optional[float] = None


@dataclass
class ModelCheckpoint:
    ''' Architecture, parameters and training state of a model '''
    config: ModelConfig
    params: Dict[str, np.ndarray]
    state: TrainingState = field(default_factory=TrainingState)

    @classmethod
    def from_model(cls, model: MultitrackTransformer,
                   state: TrainingState = None) -> 'ModelCheckpoint':
        params = {name: tensor.detach().cpu().float().numpy().copy()
                  for name, tensor in model.state_dict().items()}
        return cls(model.config, params, state or TrainingState())

    def build_model(self) -> MultitrackTransformer:
        ''' Instantiate the network and load the parameters. The model is left in eval mode. '''
        model = MultitrackTransformer(self.config)
        expected = model.state_dict()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            unexpected = sorted(set(self.params) - set(expected))
            raise ContractError(f'checkpoint arrays do not match the config: missing {missing}, '
                                f'unexpected {unexpected}')
        for name, tensor in expected.items():
            if tuple(tensor.shape) != tuple(self.params[name].shape):
                raise ContractError(f'array "{name}" has shape {self.params[name].shape}, the '
                                    f'config implies {tuple(tensor.shape)}')
        model.load_state_dict({name: torch.from_numpy(array.copy())
                               for name, array in self.params.items()})
        model.eval()
        return model

    def save(self, path: Union[str, Path]):
        header = {
            'kind': 'model',
            'config': self.config.to_dict(),
            'vocab_sizes': list(self.config.vocab.sizes),
            'training_state': asdict(self.state),
        }
        write_container(path, header, self.params)
        LOGGER.info('Wrote checkpoint at step %d to "%s"', self.state.step, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ModelCheckpoint':
        header, arrays = read_container(path)
        if header.get('kind') != 'model':
            raise DomainError(f'"{path}" does not hold a model checkpoint')
        config = ModelConfig.from_dict(header['config'])
        if list(config.vocab.sizes) != header['vocab_sizes']:
            raise ContractError(f'vocabulary sizes in "{path}" disagree with its config')
        return cls(config, arrays, TrainingState(**header['training_state']))
