"""Neighbourhood samplers around an anchor image: uniform-in-ball and adversarial walks."""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

STRATEGIES = ("uniform", "adversarial")
REFERENCE_EPSILON = 250.0
REFERENCE_DIM = 256 * 256 * 3


class SamplingError(RuntimeError):
    pass


def default_epsilon(image_shape):
    """250 at 256x256x3, scaled by sqrt(n / 196608) for other image sizes."""
    n = int(np.prod(image_shape))
    return REFERENCE_EPSILON * math.sqrt(n / REFERENCE_DIM)


@dataclass
class SamplerConfig:
    epsilon: float | None = None      # None: default_epsilon(image shape)
    count: int = 50
    max_iter: int = 10_000
    seed_pixels: int = 3
    max_retries: int = 100
    shell: bool = False               # uniform on the sphere surface instead of the ball

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.max_iter < 1 or self.seed_pixels < 1 or self.max_retries < 1:
            raise ValueError("max_iter, seed_pixels and max_retries must be >= 1")

    def resolve_epsilon(self, image_shape):
        return float(self.epsilon) if self.epsilon is not None else default_epsilon(image_shape)


@dataclass
class PerturbationSet:
    anchor: np.ndarray                # (H, W, 3) uint8
    samples: np.ndarray               # (S, H, W, 3) uint8
    distances: np.ndarray             # post-quantisation L2 distance to the anchor
    strategy: str
    epsilon: float
    seed: int | None = None
    steps: np.ndarray | None = None   # adversarial: index i of the returned iterate A_i
    targets: np.ndarray | None = None  # adversarial: drawn target norm d
    raw_norms: np.ndarray | None = None   # pre-quantisation distance of the returned point
    next_norms: np.ndarray | None = None  # adversarial: distance of A_{i+1} (inf if never computed)
    flags: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def max_distance(self):
        return float(self.distances.max())

    def as_float(self):
        return self.samples.astype(np.float64)


def _distances(x0, samples):
    diff = samples.astype(np.float64) - x0.astype(np.float64)
    return np.sqrt((diff.reshape(len(samples), -1) ** 2).sum(axis=1))


def _quantize(a):
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def sample_uniform(x0, cfg, rng, seed=None):
    """X0 + eps * u^(1/n) * direction, rounded and clipped; redraws exact copies of X0."""
    x0 = np.asarray(x0)
    eps = cfg.resolve_epsilon(x0.shape)
    n = x0.size
    xf = x0.astype(np.float64)
    samples = np.empty((cfg.count,) + x0.shape, dtype=np.uint8)
    raw = np.empty(cfg.count)
    for k in range(cfg.count):
        for _ in range(cfg.max_retries):
            direction = rng.standard_normal(n)
            direction /= np.linalg.norm(direction)
            u = 1.0 - rng.random()  # (0, 1]
            r = eps if cfg.shell else eps * u ** (1.0 / n)
            cand = _quantize(xf + r * direction.reshape(x0.shape))
            if np.any(cand != x0):
                samples[k] = cand
                raw[k] = r
                break
        else:
            raise SamplingError(f"uniform sampler: every draw rounded back to X0 (epsilon={eps} too small)")
    return PerturbationSet(x0.astype(np.uint8), samples, _distances(x0, samples), "uniform", eps, seed,
                           raw_norms=raw, flags=[""] * cfg.count)


def seed_perturbation(x0, n_pixels, rng):
    """Φ: new uniform-random channel values at ``n_pixels`` distinct pixel positions."""
    h, w, c = x0.shape
    pos = rng.choice(h * w, size=n_pixels, replace=False)
    phi = np.zeros(x0.shape)
    for p in pos:
        i, j = divmod(int(p), w)
        old = x0[i, j].astype(np.float64)
        new = old
        while np.array_equal(new, old):
            new = rng.integers(0, 256, size=c).astype(np.float64)
        phi[i, j] = new - old
    return phi


def _draw_start(x0, eps, cfg, rng):
    d = 0.0
    while d <= 0.0:
        d = rng.uniform(0.0, eps)
    phi = seed_perturbation(x0, cfg.seed_pixels, rng)
    norm = np.linalg.norm(phi)
    # keep A_0 strictly inside the target ball
    if norm > d / 2:
        phi *= (d / 2) / norm
    return d, phi


def _walk(g, x0f, starts, targets, max_iter):
    """Batched descent A_{i+1} = A_i - grad g(A_i) until the next iterate leaves its ball.

    Returns the last in-ball iterate, its index, its norm, the escaping norm
    and a per-walk status ("", "max-iter" or "stalled").
    """
    s = len(starts)
    a = starts.copy()
    final = np.empty_like(a)
    steps = np.zeros(s, dtype=np.int64)
    norms = np.zeros(s)
    nxt_norms = np.full(s, np.inf)
    status = [""] * s
    active = np.arange(s)
    for it in range(max_iter):
        if active.size == 0:
            break
        grad = g.grad(a[active])
        nxt = a[active] - grad
        dist = np.sqrt(((nxt - x0f) ** 2).reshape(active.size, -1).sum(axis=1))
        escaped = dist > targets[active]
        still = ~np.any(grad.reshape(active.size, -1) != 0, axis=1) & ~escaped
        done = escaped | still
        for local in np.flatnonzero(done):
            k = active[local]
            final[k] = a[k]
            steps[k] = it
            norms[k] = np.linalg.norm((a[k] - x0f).ravel())
            if escaped[local]:
                nxt_norms[k] = dist[local]
            else:
                status[k] = "stalled"
        a[active[~done]] = nxt[~done]
        active = active[~done]
    for k in active:
        final[k] = a[k]
        steps[k] = max_iter
        norms[k] = np.linalg.norm((a[k] - x0f).ravel())
        status[k] = "max-iter"
    return final, steps, norms, nxt_norms, status


def sample_adversarial(x0, g, cfg, rng, seed=None):
    """Gradient-descent walks on g from X0 + Φ, stopped at a random target norm d ~ U(0, eps)."""
    x0 = np.asarray(x0)
    eps = cfg.resolve_epsilon(x0.shape)
    x0f = x0.astype(np.float64)
    count = cfg.count
    samples = np.empty((count,) + x0.shape, dtype=np.uint8)
    targets = np.empty(count)
    steps = np.empty(count, dtype=np.int64)
    raw = np.empty(count)
    nxt = np.empty(count)
    flags = [""] * count
    retries = np.zeros(count, dtype=np.int64)
    pending = list(range(count))
    while pending:
        starts = np.empty((len(pending),) + x0.shape)
        d = np.empty(len(pending))
        for j, k in enumerate(pending):
            d[j], phi = _draw_start(x0, eps, cfg, rng)
            starts[j] = x0f + phi
        # regenerate Φ where the gradient vanishes at the start
        g0 = g.grad(starts).reshape(len(pending), -1)
        zero = ~np.any(g0 != 0, axis=1)
        zero_flag = np.zeros(len(pending), dtype=bool)
        for j in np.flatnonzero(zero):
            for _ in range(cfg.max_retries):
                d[j], phi = _draw_start(x0, eps, cfg, rng)
                starts[j] = x0f + phi
                if np.any(g.grad(starts[j]) != 0):
                    break
            else:
                zero_flag[j] = True
        final, st, norms, nn, status = _walk(g, x0f, starts, d, cfg.max_iter)
        again = []
        for j, k in enumerate(pending):
            q = _quantize(final[j])
            if not np.any(q != x0):
                retries[k] += 1
                if retries[k] >= cfg.max_retries:
                    raise SamplingError("adversarial sampler: walks keep rounding back to X0")
                again.append(k)
                continue
            samples[k] = q
            targets[k] = d[j]
            steps[k] = st[j]
            raw[k] = norms[j]
            nxt[k] = nn[j]
            flags[k] = "zero-grad" if zero_flag[j] else status[j]
        pending = again
    return PerturbationSet(x0.astype(np.uint8), samples, _distances(x0, samples), "adversarial", eps, seed,
                           steps=steps, targets=targets, raw_norms=raw, next_norms=nxt, flags=flags)


def sample(strategy, x0, g, cfg, rng, seed=None):
    if strategy == "uniform":
        return sample_uniform(x0, cfg, rng, seed)
    if strategy == "adversarial":
        return sample_adversarial(x0, g, cfg, rng, seed)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")


# ------------------------------------------------------------------ cache

def _opt_list(a):
    if a is None:
        return None
    return [None if not np.isfinite(v) else (int(v) if a.dtype.kind == "i" else float(v)) for v in a]


def save_perturbation_set(pset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pset.anchor).save(out / "anchor.png")
    for k, s in enumerate(pset.samples):
        Image.fromarray(s).save(out / f"sample_{k:03d}.png")
    manifest = {
        "strategy": pset.strategy,
        "epsilon": pset.epsilon,
        "seed": pset.seed,
        "count": len(pset),
        "distances": [float(v) for v in pset.distances],
        "steps": _opt_list(pset.steps),
        "targets": _opt_list(pset.targets),
        "raw_norms": _opt_list(pset.raw_norms),
        "next_norms": _opt_list(pset.next_norms),
        "flags": list(pset.flags),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return out


def load_perturbation_set(in_dir):
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        meta = json.load(fh)
    anchor = np.asarray(Image.open(src / "anchor.png"))
    samples = np.stack([np.asarray(Image.open(src / f"sample_{k:03d}.png")) for k in range(meta["count"])])

    def arr(key, dtype):
        v = meta.get(key)
        if v is None:
            return None
        return np.array([np.inf if x is None else x for x in v], dtype=dtype)

    pset = PerturbationSet(anchor, samples, _distances(anchor, samples), meta["strategy"], meta["epsilon"],
                           meta["seed"], steps=arr("steps", np.int64), targets=arr("targets", np.float64),
                           raw_norms=arr("raw_norms", np.float64), next_norms=arr("next_norms", np.float64),
                           flags=meta["flags"])
    if not np.allclose(pset.distances, meta["distances"], rtol=0, atol=1e-9):
        raise ValueError(f"perturbation cache {src} is inconsistent with its manifest")
    return pset
