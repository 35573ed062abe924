"""CSV writing with a stable float rendering.

Every float goes through repr-faithful %.17g so that equal numbers always
produce equal bytes and files round-trip losslessly; newline handling is
pinned so output is byte-identical across platforms.
"""

from __future__ import annotations

import io

import numpy as np

from .errors import InvalidParameterError


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def render_csv(header, rows) -> str:
    """Build the whole CSV document as a string."""
    if not header:
        raise InvalidParameterError("CSV needs a nonempty header")
    ncol = len(header)
    buf = io.StringIO()
    buf.write(",".join(str(h) for h in header))
    buf.write("\n")
    for row in rows:
        if len(row) != ncol:
            raise InvalidParameterError(
                f"row width {len(row)} does not match header width {ncol}"
            )
        buf.write(",".join(format_value(v) for v in row))
        buf.write("\n")
    return buf.getvalue()


def write_csv(path, header, rows) -> str:
    """Write rows to path; returns what was written."""
    text = render_csv(header, rows)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text
