import math
import os

import numpy as np

from .exceptions import LayerMismatch


def nearest_rank(values, percent):
    """Nearest-rank percentile: the ceil(percent/100 * n)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise ValueError("percentile of an empty sequence")
    rank = max(1, math.ceil(round(percent / 100.0 * values.size, 9)))
    return float(values[rank - 1])


def check_layers(expected, archive):
    names = archive.layer_names
    if list(expected) != names:
        raise LayerMismatch(f"archive layers {names} do not match fitted layers {list(expected)}")


def thread_count():
    """Worker thread cap from OODGUARD_THREADS (default 1)."""
    raw = os.environ.get("OODGUARD_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
