"""Vector geometry, correlation statistics and seeded random streams."""
import zlib

import numpy as np
from scipy.stats import rankdata


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is requested for a constant input."""


def as_finite(a, name="input"):
    """Return ``a`` as a float64 array, rejecting NaN and infinities."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def l2_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm((a - b).ravel()))


def _paired(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two paired values")
    return a, b


def pearson(a, b):
    """Sample Pearson correlation.

    Raises :class:`UndefinedCorrelationError` when either input has zero
    variance; a sentinel value would silently bias downstream means.
    """
    a, b = _paired(a, b)
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    r = np.dot(da, db) / (sa * sb)
    return float(np.clip(r, -1.0, 1.0))


def average_ranks(values):
    """1-based ranks with ties sharing their mean rank."""
    return rankdata(np.asarray(values, dtype=np.float64).ravel(), method="average")


def spearman(a, b):
    a, b = _paired(a, b)
    return pearson(average_ranks(a), average_ranks(b))


def argmax_index(values):
    """Index of the largest value; ties resolve to the lowest index."""
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("argmax of empty input")
    return int(np.argmax(v.ravel()))


def trapezoid_auc(xs, ys):
    """Trapezoid-rule area under ``ys(xs)`` divided by the abscissa span."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
        raise ValueError("xs and ys must be 1-D with equal length >= 2")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("xs must be strictly increasing")
    area = np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0)
    return float(area / (xs[-1] - xs[0]))


def _key_part(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def random_stream(seed, *key):
    """Independent generator for ``(seed, *key)``.

    String key parts are hashed with CRC32 so call sites can name their
    substreams (``random_stream(7, "uniform", 3)``).  Distinct keys give
    statistically independent streams; equal keys replay the same draws.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_part(k) for k in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
