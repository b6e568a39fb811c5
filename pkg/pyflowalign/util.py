import os
import csv
import json
from typing import List, Optional, Sequence

import numpy as np

from pyflowalign.errors import ConfigError


def write_csv(path: str, records: List[dict], columns: Sequence[str]):
    """
    Writes the records as rows of a CSV file with the given header. Floats are written with ``repr``, so that
    the file holds the exact values and identical runs produce identical files.
    """
    with open(path, mode='w', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(columns)
        for record in records:
            writer.writerow([_format_value(record[column]) for column in columns])


def _format_value(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def sample_columns(dim: int) -> List[str]:
    return [f'x{i}' for i in range(dim)]


def write_samples_csv(path: str, samples: np.ndarray, models: Optional[Sequence[str]] = None):
    """
    Writes sampled endpoints with the header ``x0,...,x{d-1}``, followed by a ``model`` column if a model
    label is given for every row.
    """
    samples = np.atleast_2d(samples)
    columns = sample_columns(samples.shape[1])
    records = [dict(zip(columns, row)) for row in samples.tolist()]
    if models is not None:
        columns = columns + ['model']
        for record, model in zip(records, models):
            record['model'] = model

    write_csv(path, records, columns)


def write_json(path: str, data: dict):
    with open(path, mode='w') as file:
        json.dump(data, file, indent=4)


def ensure_directory(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def require_integers(owner, keys: Sequence[str]):
    """
    :raises ConfigError: naming the first of the attributes ``keys`` of ``owner`` which is not an integer.
        Booleans are not accepted as integers.
    """
    for key in keys:
        value = getattr(owner, key)
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(f'"{key}" has to be an integer, got {value!r}', key=key)
