''' Run configuration and its layering.

Values are resolved from lowest to highest priority:

    dataclass defaults < JSON config file < "section.key=value" overrides < explicit flags

The JSON file may hold the sections "model", "train" and "generate" plus a top-level "seed". The
seed comes from the --seed flag, then the MMT_SEED environment variable, then the config file and
finally defaults to 0.
'''
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union
import json
import logging
import os

from mmtoolkit.exceptions import ConfigError
from mmtoolkit.models.transformer import ModelConfig
from mmtoolkit.representation import MAX_BEAT
from mmtoolkit.sampler import TOP_K_FRACTION, GenerationMode
from mmtoolkit.training import TrainConfig
from mmtoolkit.utils import parse_override


LOGGER = logging.getLogger(__name__)

SEED_VARIABLE = 'MMT_SEED'
RUN_CONFIG_NAME = 'run.config'


@dataclass
class GenerateConfig:
    mode: str = GenerationMode.UNCONDITIONED.value
    n_samples: int = 1
    max_len: int = 1024
    max_beat: int = MAX_BEAT
    instruments: List[str] = field(default_factory=list)
    n_beats: int = 4
    restrict_to_declared_instruments: bool = False
    greedy: bool = False
    top_k_fraction: float = TOP_K_FRACTION

    def __post_init__(self):
        try:
            self.mode = GenerationMode.from_str(self.mode).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if isinstance(self.instruments, str):
            self.instruments = [name.strip() for name in self.instruments.split(',')
                                if name.strip()]
        if self.n_samples < 1:
            raise ConfigError(f'n_samples must be at least 1, got {self.n_samples}')
        if not 0 < self.top_k_fraction <= 1:
            raise ConfigError(f'top_k_fraction must lie in (0, 1], got {self.top_k_fraction}')


SECTIONS = {
    'model': ModelConfig,
    'train': TrainConfig,
    'generate': GenerateConfig,
}


@dataclass
class RunConfig:
    ''' Everything a command line run depends on '''
    command: str
    seed: int = 0
    paths: Dict[str, Optional[str]] = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory: Union[str, Path]) -> Path:
        ''' Write the resolved configuration to run.config in directory '''
        path = Path(directory) / RUN_CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n')
        return path


def resolve_seed(flag: Optional[int], file_seed: Optional[int] = None) -> int:
    if flag is not None:
        return flag
    from_environment = os.environ.get(SEED_VARIABLE)
    if from_environment is not None and from_environment.strip():
        try:
            return int(from_environment)
        except ValueError as exc:
            raise ConfigError(f'{SEED_VARIABLE} must be an integer, got '
                              f'"{from_environment}"') from exc
    if file_seed is not None:
        return int(file_seed)
    return 0


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f'"{path}" is not valid JSON: {exc}') from exc
    if not isinstance(values, dict):
        raise ConfigError(f'"{path}" must hold a JSON object')
    unknown = set(values) - set(SECTIONS) - {'seed'}
    if unknown:
        raise ConfigError(f'unknown sections in "{path}": {", ".join(sorted(unknown))}')
    return values


def _set(values: Dict[str, Dict[str, Any]], section: str, key: str, value: Any):
    if section not in SECTIONS:
        raise ConfigError(f'unknown config section "{section}"')
    known = {entry.name for entry in fields(SECTIONS[section])}
    if key not in known:
        raise ConfigError(f'unknown key "{key}" in config section "{section}"')
    values[section][key] = value


def _build(section: str, values: Dict[str, Any]):
    try:
        return SECTIONS[section](**values)
    except TypeError as exc:
        raise ConfigError(f'invalid "{section}" configuration: {exc}') from exc


def resolve(command: str, config_path: Union[str, Path] = None, overrides: Iterable[str] = (),
            flags: Dict[Tuple[str, str], Any] = None, seed: Optional[int] = None,
            paths: Dict[str, Optional[str]] = None) -> RunConfig:
    ''' Layer defaults, config file, overrides and flags into a RunConfig.

    Args:
        command (str): The subcommand being run
        config_path (Union[str, Path]): JSON config file, if any
        overrides (Iterable[str]): "section.key=value" strings
        flags (Dict[Tuple[str, str], Any]): Explicit flag values by (section, key); None values
        were not given and do not override anything
        seed (Optional[int]): The --seed flag
        paths (Dict[str, Optional[str]]): Input and output paths, recorded as given
    '''
    values = {section: {} for section in SECTIONS}
    file_seed = None
    if config_path is not None:
        file_values = read_config_file(config_path)
        file_seed = file_values.pop('seed', None)
        for section, section_values in file_values.items():
            for key, value in section_values.items():
                _set(values, section, key, value)
    for override in overrides:
        _set(values, *parse_override(override))
    for (section, key), value in (flags or {}).items():
        if value is not None:
            _set(values, section, key, value)

    resolved_seed = resolve_seed(seed, file_seed)
    values['train']['seed'] = resolved_seed
    run_config = RunConfig(command, resolved_seed, dict(paths or {}),
                           **{section: _build(section, section_values)
                              for section, section_values in values.items()})
    LOGGER.debug('Resolved configuration: %s', run_config)
    return run_config
