"""CSV writing with round-trip float formatting."""

import csv
import logging
from pathlib import Path
from typing import Iterable, Sequence, Union

logger = logging.getLogger(__name__)


def format_number(value) -> str:
    """17 significant digits for floats; integers and strings pass through."""
    if isinstance(value, (str, bool)):
        return str(value)
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".17g")


def write_csv(
        path: Union[str, Path],
        header: Sequence[str],
        rows: Iterable[Sequence],
) -> Path:
    """Write rows under header; raises OSError with the path in the message."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            count = 0
            for row in rows:
                writer.writerow([format_number(v) for v in row])
                count += 1
    except OSError as e:
        raise OSError(f"failed writing {path}: {e}") from e
    logger.debug(f"Wrote {count} rows to {path}")
    return path


def read_csv(path: Union[str, Path]):
    """Header and float rows of a CSV written by write_csv."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return header, rows
