"""CSV output with a pinned dialect: comma, '.' decimals, header, LF endings.

Floats are written with ``repr`` (shortest round-trip form) so repeated
runs produce byte-identical files on every platform.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):  # numpy scalar
        x = v.item()
        return repr(x) if isinstance(x, float) else str(x)
    return str(v)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows
