"""Local-surrogate stability/correctness metrics and the baseline metrics they are compared with.

Conventions: images and samples are raw-unit arrays; saliency maps are
either H x W x 3 or H x W (broadcast over channels).  ``g`` is a
:class:`~xaimeter.model.ClassLogitModel`.
"""
from dataclasses import dataclass

import numpy as np

from .explainers import broadcast_map, importance_2d, minmax_normalize
from .numeric import UndefinedCorrelationError, l2_distance, pearson, trapezoid_auc

SAMPLE_METRICS = ("lip", "lss", "cle", "lrc")
METRIC_IDS = ("lip", "lss", "cle", "lrc", "del", "ad", "ai", "ag", "pcc", "sim")
# metrics whose better value is larger; the consensus analysis negates these
HIGHER_IS_BETTER = frozenset({"ai", "ag", "pcc", "sim"})
GAZE_METRICS = frozenset({"pcc", "sim"})
DEFAULT_ETA_SQ = 1e-6


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (reported, never replaced by a sentinel)."""


@dataclass(frozen=True)
class LinearSurrogate:
    """First-order model ``E(X) = s . (X - X0) + g(X0)``, all vectors flattened."""
    anchor: np.ndarray
    saliency: np.ndarray
    base: float

    @classmethod
    def build(cls, x0, saliency, base):
        x0 = np.asarray(x0, dtype=np.float64)
        s = broadcast_map(saliency, x0.shape).ravel()
        if not np.all(np.isfinite(s)) or not np.isfinite(base):
            raise ValueError("surrogate needs a finite saliency map and base value")
        return cls(x0.ravel(), s, float(base))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.size == self.anchor.size:
            return float(self.saliency @ (x.ravel() - self.anchor) + self.base)
        flat = x.reshape(-1, self.anchor.size)
        return (flat - self.anchor) @ self.saliency + self.base


def surrogate_eval(e, x):
    x = np.asarray(x)
    if x.size != e.anchor.size:
        raise ValueError(f"input has {x.size} values, surrogate expects {e.anchor.size}")
    return e(x)


def midpoint_gap(e0, e1):
    """|E0(m) - E1(m)| at the midpoint m of the two anchors."""
    if e0.anchor.shape != e1.anchor.shape:
        raise ValueError("surrogates over different image shapes")
    m = (e0.anchor + e1.anchor) / 2.0
    return abs(e0(m) - e1(m))


def _check_samples(x0, samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == x0.ndim:
        samples = samples[None]
    if len(samples) == 0:
        raise ValueError("empty sample set")
    dist = np.sqrt(((samples - x0) ** 2).reshape(len(samples), -1).sum(axis=1))
    if np.any(dist <= 0):
        raise ValueError("sample identical to the anchor")
    return samples, dist


def lip(x0, s0, samples, sample_maps, normalize=False):
    """max_k ||s(X0) - s(X_k)|| / ||X0 - X_k||, maps flattened after channel broadcast.

    ``normalize`` min-max scales every map first.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    samples, dist = _check_samples(x0, samples)
    prep = (lambda m: broadcast_map(minmax_normalize(m), x0.shape)) if normalize \
        else (lambda m: broadcast_map(m, x0.shape))
    a = prep(s0).ravel()
    diffs = np.array([np.linalg.norm(a - prep(m).ravel()) for m in sample_maps])
    return float(np.max(diffs / dist))


def lss(x0, s0, g0, samples, sample_maps, sample_values):
    """max_k |E_X0(m_k) - E_Xk(m_k)| / ||X0 - X_k|| with m_k the midpoint."""
    x0 = np.asarray(x0, dtype=np.float64)
    samples, dist = _check_samples(x0, samples)
    e0 = LinearSurrogate.build(x0, s0, g0)
    gaps = np.array([midpoint_gap(e0, LinearSurrogate.build(xk, mk, gk))
                     for xk, mk, gk in zip(samples, sample_maps, sample_values)])
    return float(np.max(gaps / dist))


def surrogate_errors(x0, s0, g0, samples, sample_values):
    """C(X0, X_k) = |E_X0(X_k) - g(X_k)| for every sample."""
    x0 = np.asarray(x0, dtype=np.float64)
    samples, _ = _check_samples(x0, samples)
    e0 = LinearSurrogate.build(x0, s0, g0)
    return np.abs(np.atleast_1d(e0(samples)) - np.asarray(sample_values, dtype=np.float64))


def cle(x0, s0, g0, samples, sample_values):
    return float(np.mean(surrogate_errors(x0, s0, g0, samples, sample_values)))


def lrc(x0, s0, g0, samples, sample_values, eta_sq=DEFAULT_ETA_SQ):
    """Mean of C(X0, X_k) / (|g(X0) - g(X_k)| + eta^2)."""
    if not eta_sq > 0:
        raise ValueError("eta_sq must be > 0")
    c = surrogate_errors(x0, s0, g0, samples, sample_values)
    delta = np.abs(g0 - np.asarray(sample_values, dtype=np.float64))
    return float(np.mean(c / (delta + eta_sq)))


# ------------------------------------------------------------- deletion

def deletion_order(saliency):
    """Pixel indices (row-major) from most to least important; ties by index."""
    imp = importance_2d(saliency).ravel()
    return np.argsort(-imp, kind="stable")


def deletion_counts(n_pixels, steps, cap=0.5):
    fractions = np.arange(steps + 1) * (cap / steps)
    return fractions, np.floor(fractions * n_pixels + 1e-9).astype(np.int64)


def delete_pixels(x0, order, count):
    h, w = x0.shape[:2]
    out = np.array(x0, dtype=np.float64, copy=True).reshape(h * w, -1)
    out[order[:count]] = 0.0
    return out.reshape(x0.shape)


def deletion_audc(x0, saliency, g, steps=50, cap=0.5):
    """Area under the deletion curve up to ``cap`` of the pixels blacked out.

    ``g`` supplies the confidence (use ``output="prob"`` for the usual
    softmax-probability curve).  Returns ``(audc, fractions, values)``.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    x0 = np.asarray(x0, dtype=np.float64)
    imp = importance_2d(saliency)
    if imp.shape != x0.shape[:2]:
        raise ValueError(f"saliency shape {np.shape(saliency)} does not match image {x0.shape}")
    order = deletion_order(imp)
    fractions, counts = deletion_counts(x0.shape[0] * x0.shape[1], steps, cap)
    batch = np.stack([delete_pixels(x0, order, c) for c in counts])
    values = np.asarray(g(batch), dtype=np.float64)
    return trapezoid_auc(fractions, values), fractions, values


# ------------------------------------------------------------- AD / AI / AG

def explanation_map(x0, saliency):
    """s(X0) * X0 with the saliency reduced to 2-D and min-max normalised."""
    x0 = np.asarray(x0, dtype=np.float64)
    s = minmax_normalize(importance_2d(saliency))
    return x0 * s[..., None]


def ad_ai_ag(x0, saliency, g):
    """Per-image (AD, AI, AG) terms, each x100.

    ``g`` must expose a probability (``output="prob"``).  AD is undefined
    when the original confidence is 0 and AG when it is 1; those come back
    as NaN.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y, o = g(np.stack([x0, explanation_map(x0, saliency)]))
    ad = 100.0 * max(0.0, y - o) / y if y > 0 else np.nan
    ai = 100.0 * float(o > y)
    ag = 100.0 * max(0.0, o - y) / (1.0 - y) if y < 1 else np.nan
    return ad, ai, ag


# ---------------------------------------------------------- plausibility

def plausibility_pcc(saliency, gaze):
    s = importance_2d(saliency)
    gz = np.asarray(gaze, dtype=np.float64)
    if s.shape != gz.shape:
        raise ValueError(f"saliency {s.shape} and gaze {gz.shape} differ")
    try:
        return pearson(s, gz)
    except UndefinedCorrelationError as exc:
        raise UndefinedMetricError(str(exc)) from None


def _as_distribution(m):
    m = np.asarray(m, dtype=np.float64)
    m = m - m.min()
    total = m.sum()
    if total <= 0:
        raise UndefinedMetricError("constant map has no distribution")
    return m / total


def plausibility_sim(saliency, gaze):
    s = importance_2d(saliency)
    gz = np.asarray(gaze, dtype=np.float64)
    if s.shape != gz.shape:
        raise ValueError(f"saliency {s.shape} and gaze {gz.shape} differ")
    return float(np.minimum(_as_distribution(s), _as_distribution(gz)).sum())


# ------------------------------------------------------------ radius

def evaluation_radius(metric, x0, saliency=None, sample_distances=None, cap=0.5):
    """L2 distance between X0 and the inputs a metric evaluates on."""
    x0 = np.asarray(x0, dtype=np.float64)
    if metric == "del":
        order = deletion_order(saliency)
        count = deletion_counts(x0.shape[0] * x0.shape[1], 1, cap)[1][-1]
        return l2_distance(x0, delete_pixels(x0, order, count))
    if metric in ("ad", "ai", "ag"):
        return l2_distance(x0, explanation_map(x0, saliency))
    if metric in SAMPLE_METRICS:
        return float(np.max(sample_distances))
    if metric in GAZE_METRICS:
        return float("nan")
    raise ValueError(f"unknown metric {metric!r}")
