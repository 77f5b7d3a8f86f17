"""Saliency-map explainers.

Gradient-family maps come back H x W x 3 in raw gradient units (no
normalisation, so they can serve directly as linear-surrogate slopes).
CAM-family maps come back H x W in [0, 1] and are broadcast over the
channels wherever a 3-channel vector is needed.

Every explainer accepts one image ``(H, W, 3)`` or a batch ``(N, H, W, 3)``.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

EXPLAINER_KINDS = (
    "grads", "grad-times-input", "integrated-gradients", "smoothgrads",
    "guided-backprop", "grad-cam", "fake-cam", "cb-cam",
)
TRIVIAL_KINDS = frozenset({"fake-cam", "cb-cam"})
CAM_KINDS = frozenset({"grad-cam", "fake-cam", "cb-cam"})
STOCHASTIC_KINDS = frozenset({"smoothgrads"})

_DEFAULT_PARAMS = {
    "integrated-gradients": {"steps": 10},
    "smoothgrads": {"samples": 10, "noise": 0.2},
    "grad-cam": {"layer": None},
}


@dataclass(frozen=True)
class ExplainerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPLAINER_KINDS:
            raise ValueError(f"unknown explainer {self.kind!r}; choose from {', '.join(EXPLAINER_KINDS)}")
        merged = {**_DEFAULT_PARAMS.get(self.kind, {}), **self.params}
        unknown = set(merged) - set(_DEFAULT_PARAMS.get(self.kind, {}))
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        if self.kind == "integrated-gradients" and int(merged["steps"]) < 1:
            raise ValueError("integrated-gradients needs steps >= 1")
        if self.kind == "smoothgrads" and (int(merged["samples"]) < 1 or merged["noise"] < 0):
            raise ValueError("smoothgrads needs samples >= 1 and noise >= 0")
        object.__setattr__(self, "params", merged)

    @property
    def trivial(self):
        return self.kind in TRIVIAL_KINDS

    @property
    def stochastic(self):
        return self.kind in STOCHASTIC_KINDS

    @property
    def name(self):
        return self.kind


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, 3) or (N, H, W, 3), got {x.shape}")


# ------------------------------------------------------- map utilities

def minmax_normalize(m):
    """Scale to [0, 1]; a constant map becomes all ones if positive, else all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi > lo:
        return (m - lo) / (hi - lo)
    return np.ones_like(m) if hi > 0 else np.zeros_like(m)


def importance_2d(saliency):
    """Per-pixel importance: mean absolute value over channels for 3-channel maps."""
    s = np.asarray(saliency, dtype=np.float64)
    if s.ndim == 3:
        return np.abs(s).mean(axis=2)
    if s.ndim == 2:
        return s
    raise ValueError(f"saliency must be H x W or H x W x 3, got {s.shape}")


def broadcast_map(saliency, image_shape):
    """The map as an H x W x 3 array (2-D maps replicated over channels)."""
    s = np.asarray(saliency, dtype=np.float64)
    h, w, c = image_shape
    if s.shape == (h, w):
        return np.repeat(s[..., None], c, axis=2)
    if s.shape == (h, w, c):
        return s
    raise ValueError(f"saliency shape {s.shape} incompatible with image {image_shape}")


def flat_map(saliency, image_shape):
    return broadcast_map(saliency, image_shape).ravel()


def _interp_matrix(n_out, n_in):
    """Bilinear (half-pixel centres, edge clamped) resampling weights, n_out x n_in."""
    r = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        r[i, i0] += 1.0 - t
        r[i, i1] += t
    return r


def bilinear_upsample(m, out_shape):
    ry = _interp_matrix(out_shape[0], m.shape[-2])
    rx = _interp_matrix(out_shape[1], m.shape[-1])
    return ry @ m @ rx.T


def nearest_upsample(m, out_shape):
    h, w = m.shape
    rows = (np.arange(out_shape[0]) * h) // out_shape[0]
    cols = (np.arange(out_shape[1]) * w) // out_shape[1]
    return m[np.ix_(rows, cols)]


# --------------------------------------------------- gradient family

def explain_grads(g, x):
    return g.grad(x)


def explain_grad_times_input(g, x):
    x = np.asarray(x, dtype=np.float64)
    return g.grad(x) * x


def explain_integrated_gradients(g, x, steps=10, baseline=None, return_slope=False):
    """Midpoint Riemann sum of gradients on the straight path from ``baseline`` (black).

    With ``return_slope`` also returns the path-averaged gradient, i.e. the
    map divided by ``x - baseline`` (defined even where the two coincide).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    xb, single = _batched(x)
    base = np.zeros_like(xb) if baseline is None else np.broadcast_to(baseline, xb.shape).astype(np.float64)
    alphas = (np.arange(steps) + 0.5) / steps
    delta = xb - base
    path = base[:, None] + alphas[None, :, None, None, None] * delta[:, None]
    grads = g.grad(path.reshape(-1, *xb.shape[1:])).reshape(path.shape)
    slope = grads.mean(axis=1)
    out = delta * slope
    if single:
        out, slope = out[0], slope[0]
    return (out, slope) if return_slope else out


def explain_smoothgrads(g, x, samples=10, noise=0.2, rng=None):
    """Mean gradient over Gaussian-noised copies of ``x``.

    Noise sigma is ``noise`` times each channel's value range in the image.
    ``rng`` is one generator, or one per image for a batch.
    """
    xb, single = _batched(x)
    if noise == 0:
        grads = g.grad(xb)
        return grads[0] if single else grads
    if rng is None:
        raise ValueError("smoothgrads needs a random generator")
    rngs = [rng] if single else (list(rng) if isinstance(rng, (list, tuple)) else None)
    if rngs is None or len(rngs) != len(xb):
        raise ValueError("pass one generator per image for batched smoothgrads")
    noisy = np.empty((len(xb), samples) + xb.shape[1:])
    for i, (img, r) in enumerate(zip(xb, rngs)):
        span = img.max(axis=(0, 1)) - img.min(axis=(0, 1))
        noisy[i] = img + r.normal(size=(samples,) + img.shape) * (noise * span)
    grads = g.grad(noisy.reshape(-1, *xb.shape[1:])).reshape(noisy.shape).mean(axis=1)
    return grads[0] if single else grads


def explain_guided_backprop(g, x):
    return g.guided_grad(x)


# ------------------------------------------------------------ CAM family

def gradcam_from_activations(feats, grads, out_shape):
    """Grad-CAM map from (C, h, w) activations and gradients."""
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, feats, axes=(0, 0)), 0.0)
    return minmax_normalize(bilinear_upsample(cam, out_shape))


def explain_gradcam(g, x, layer=None):
    xb, single = _batched(x)
    if layer is None:
        convs = g.classifier.conv_layer_names
        if not convs:
            raise ValueError("model has no conv layer for Grad-CAM")
        layer = convs[-1]
    feats, grads = g.conv_features_and_grads(xb, layer)
    out = np.stack([gradcam_from_activations(f, d, xb.shape[1:3]) for f, d in zip(feats, grads)])
    return out[0] if single else out


def _grid_cam(x, grid):
    xb, single = _batched(x)
    m = nearest_upsample(grid, xb.shape[1:3])
    return m if single else np.broadcast_to(m, (len(xb),) + m.shape).copy()


def fake_cam_grid():
    grid = np.ones((7, 7))
    grid[0, 0] = 0.0
    return grid


def cb_cam_grid():
    grid = np.zeros((7, 7))
    grid[3, 3] = 1.0
    return grid


def explain_fake_cam(x):
    return _grid_cam(x, fake_cam_grid())


def explain_cb_cam(x):
    return _grid_cam(x, cb_cam_grid())


# ------------------------------------------------------------- dispatch

def explain(spec, g, x, rng=None):
    """Saliency map(s) for ``spec`` explaining ``g`` at ``x``."""
    p = spec.params
    if spec.kind == "grads":
        return explain_grads(g, x)
    if spec.kind == "grad-times-input":
        return explain_grad_times_input(g, x)
    if spec.kind == "integrated-gradients":
        return explain_integrated_gradients(g, x, steps=int(p["steps"]))
    if spec.kind == "smoothgrads":
        return explain_smoothgrads(g, x, samples=int(p["samples"]), noise=float(p["noise"]), rng=rng)
    if spec.kind == "guided-backprop":
        return explain_guided_backprop(g, x)
    if spec.kind == "grad-cam":
        return explain_gradcam(g, x, layer=p["layer"])
    if spec.kind == "fake-cam":
        return explain_fake_cam(x)
    if spec.kind == "cb-cam":
        return explain_cb_cam(x)
    raise ValueError(f"unknown explainer {spec.kind!r}")  # pragma: no cover


def explain_with_slope(spec, g, x, rng=None):
    """``(map, slope)``: the saliency map and the slope it contributes to a linear surrogate.

    The two coincide except for integrated gradients, an attribution whose
    surrogate slope is the path-averaged gradient (map / (x - baseline)).
    """
    if spec.kind == "integrated-gradients":
        return explain_integrated_gradients(g, x, steps=int(spec.params["steps"]), return_slope=True)
    m = explain(spec, g, x, rng)
    return m, m


def parse_explainers(text):
    """``"grads,smoothgrads:samples=20:noise=0.1"`` -> list of specs."""
    specs = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        kind, *opts = item.split(":")
        params = {}
        for opt in opts:
            key, _, val = opt.partition("=")
            try:
                params[key] = int(val)
            except ValueError:
                try:
                    params[key] = float(val)
                except ValueError:
                    params[key] = val
        specs.append(ExplainerSpec(kind, params))
    return specs


# ---------------------------------------------------------------- export

def save_saliency_png(saliency, path):
    """16-bit grayscale PNG of the 2-D importance map plus a JSON sidecar with its scale."""
    path = Path(path)
    imp = importance_2d(saliency)
    lo, hi = float(imp.min()), float(imp.max())
    scaled = (imp - lo) / (hi - lo) if hi > lo else np.zeros_like(imp)
    Image.fromarray(np.rint(scaled * 65535).astype(np.uint16)).save(path)
    sidecar = {
        "min": lo, "max": hi, "shape": list(np.shape(saliency)),
        "reduction": "mean-abs-over-channels" if np.ndim(saliency) == 3 else "none",
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return path
