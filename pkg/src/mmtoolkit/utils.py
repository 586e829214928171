import math
import re
from typing import Any, Sequence, Tuple

import numpy as np

from mmtoolkit.exceptions import ConfigError, UndefinedMetricError


OVERRIDE = re.compile(r'^(?P<section>[a-z_]+)\.(?P<key>[a-z_]+)=(?P<value>.*)$')
def parse_override(override: str) -> Tuple[str, str, Any]:
    ''' Parse a "section.key=value" override. Booleans, null, numbers and comma-separated lists
    are converted; anything else stays a string.
    '''
    match = OVERRIDE.match(override.strip())
    if not match:
        raise ConfigError(f'Could not parse override "{override}"; expected section.key=value')
    raw_value = match.group('value')
    return match.group('section'), match.group('key'), parse_value(raw_value)


def parse_value(raw_value: str) -> Any:
    lowered = raw_value.strip().lower()
    if lowered in ('true', 'false'):
        return lowered == 'true'
    if lowered in ('null', 'none'):
        return None
    try:
        return int(raw_value)
    except ValueError:
        pass
    try:
        return float(raw_value)
    except ValueError:
        pass
    if ',' in raw_value:
        return [parse_value(item) for item in raw_value.split(',') if item.strip()]
    return raw_value.strip()


CI_Z = 1.96
def mean_confidence_interval(values: Sequence[float]) -> Tuple[float, float]:
    ''' Mean and half-width of the 95% confidence interval (1.96 standard errors).
    The half-width of a single value is 0.
    '''
    values = np.asarray(values, dtype=np.float64)
    if not values.size:
        raise UndefinedMetricError('cannot average an empty set of values')
    mean = float(values.mean())
    if values.size < 2:
        return mean, 0.0
    stderr = float(values.std(ddof=1)) / math.sqrt(values.size)
    return mean, CI_Z * stderr
