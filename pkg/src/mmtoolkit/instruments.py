''' Mapping of the 128 General MIDI programs onto at most 64 instruments.

The default table lives in data/instrument_map.csv and collapses programs by timbral family
(every acoustic and electric grand piano is a "piano"). Any CSV with the columns
program,instrument_index,instrument_name covering all 128 programs can replace it.
'''
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Union
import csv

from mmtoolkit.exceptions import ConfigError, DomainError


DEFAULT_MAP_PATH = Path(__file__).parent / 'data' / 'instrument_map.csv'
N_PROGRAMS = 128
MAX_INSTRUMENTS = 64
CSV_HEADER = ('program', 'instrument_index', 'instrument_name')


class InstrumentMap:
    ''' A total table from MIDI program to instrument index, plus a display name per index.

    The representative program of an instrument is the first program that maps to it. Decoding
    uses the representative, since the event representation only keeps the instrument.
    '''

    def __init__(self, program_to_index: List[int], names: List[str]):
        self._validate(program_to_index, names)
        self._program_to_index = list(program_to_index)
        self._names = list(names)
        self._representatives = {}
        for program, index in enumerate(self._program_to_index):
            self._representatives.setdefault(index, program)
        self._name_to_index = {name: index for index, name in enumerate(self._names)}

    @staticmethod
    def _validate(program_to_index: List[int], names: List[str]):
        if len(program_to_index) != N_PROGRAMS:
            raise ConfigError(f'an instrument map needs {N_PROGRAMS} programs, got '
                              f'{len(program_to_index)}')
        if len(names) > MAX_INSTRUMENTS:
            raise ConfigError(f'an instrument map may hold at most {MAX_INSTRUMENTS} instruments, '
                              f'got {len(names)}')
        if set(program_to_index) != set(range(len(names))):
            raise ConfigError('instrument indices must be 0-based, contiguous and all used')
        if len(set(names)) != len(names):
            raise ConfigError('instrument names must be unique')

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'InstrumentMap':
        ''' Read a map from a CSV file with the columns program,instrument_index,instrument_name

        Args:
            path (Union[str, Path]): The CSV file to read

        Returns:
            (InstrumentMap): The validated map
        '''
        program_to_index: Dict[int, int] = {}
        names: Dict[int, str] = {}
        with open(path, 'r', newline='') as file_handle:
            reader = csv.DictReader(file_handle)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise ConfigError(f'instrument map "{path}" must have the header '
                                  f'{",".join(CSV_HEADER)}')
            for row in reader:
                try:
                    program = int(row['program'])
                    index = int(row['instrument_index'])
                except ValueError as exc:
                    raise ConfigError(f'bad row in instrument map "{path}": {row}') from exc
                name = row['instrument_name'].strip()
                if program in program_to_index:
                    raise ConfigError(f'program {program} is listed twice in "{path}"')
                if names.setdefault(index, name) != name:
                    raise ConfigError(f'instrument index {index} has two names in "{path}": '
                                      f'"{names[index]}" and "{name}"')
                program_to_index[program] = index
        if sorted(program_to_index) != list(range(N_PROGRAMS)):
            raise ConfigError(f'instrument map "{path}" must list every program 0-127 once')
        return cls([program_to_index[program] for program in range(N_PROGRAMS)],
                   [names[index] for index in sorted(names)])

    @classmethod
    def default(cls) -> 'InstrumentMap':
        ''' The map shipped in data/instrument_map.csv '''
        return _default_map()

    def save(self, path: Union[str, Path]):
        with open(path, 'w', newline='') as file_handle:
            writer = csv.writer(file_handle, lineterminator='\n')
            writer.writerow(CSV_HEADER)
            for program, index in enumerate(self._program_to_index):
                writer.writerow((program, index, self._names[index]))

    def __len__(self):
        return len(self._names)

    @property
    def names(self) -> List[str]:
        return list(self._names)

    def program_to_instrument(self, program: int) -> int:
        if not 0 <= program < N_PROGRAMS:
            raise DomainError(f'MIDI program {program} is outside of 0-127')
        return self._program_to_index[program]

    def representative_program(self, index: int) -> int:
        if index not in self._representatives:
            raise DomainError(f'instrument index {index} is not in the map')
        return self._representatives[index]

    def name_of(self, index: int) -> str:
        if not 0 <= index < len(self._names):
            raise DomainError(f'instrument index {index} is not in the map')
        return self._names[index]

    def index_of(self, name: str) -> int:
        clean_name = name.strip().lower().replace(' ', '-').replace('_', '-')
        if clean_name not in self._name_to_index:
            raise DomainError(f'Could not find an instrument named "{name}"')
        return self._name_to_index[clean_name]


def program_to_instrument(program: int, instrument_map: InstrumentMap = None) -> int:
    ''' Look up the instrument index of a MIDI program in a map (the default map if None) '''
    instrument_map = instrument_map or InstrumentMap.default()
    return instrument_map.program_to_instrument(program)


@lru_cache(maxsize=1)
def _default_map() -> InstrumentMap:
    return InstrumentMap.load(DEFAULT_MAP_PATH)
