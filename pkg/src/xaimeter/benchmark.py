"""The (metric x explainer) evaluation matrix and the analyses built on it."""
import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .explainers import ExplainerSpec, explain_with_slope
from .model import ClassLogitModel
from .numeric import UndefinedCorrelationError, pearson, random_stream, spearman
from .perturbation import SamplerConfig, load_perturbation_set, sample, save_perturbation_set

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OK, UNDEFINED, FAILED = 0, 1, 2
_STATUS_NAMES = {OK: "ok", UNDEFINED: "undefined", FAILED: "failed"}
_STATUS_CODES = {v: k for k, v in _STATUS_NAMES.items()}
CSV_HEADER = ["metric", "explainer", "mean_score", "mean_radius", "n_defined", "n_failed"]


class TableMismatchError(ValueError):
    """Two score tables cannot be compared (different model, data or explainers)."""


class ResultsFormatError(ValueError):
    """A saved result set is corrupt or from another schema version."""


@dataclass
class ScoreTable:
    metrics: list
    explainers: list
    scores: np.ndarray      # (metric, explainer, image); NaN where not defined
    radii: np.ndarray       # same shape; NaN where not applicable
    status: np.ndarray      # same shape; OK / UNDEFINED / FAILED
    strategy: str
    meta: dict = field(default_factory=dict)

    @property
    def n_images(self):
        return self.scores.shape[2]

    @property
    def trivial(self):
        return set(self.meta.get("trivial", []))

    def _idx(self, metric, explainer):
        return self.metrics.index(metric), self.explainers.index(explainer)

    def raw(self, metric, explainer):
        i, j = self._idx(metric, explainer)
        return self.scores[i, j]

    def mean(self, metric, explainer):
        i, j = self._idx(metric, explainer)
        ok = self.status[i, j] == OK
        return float(self.scores[i, j][ok].mean()) if ok.any() else float("nan")

    def mean_radius(self, metric, explainer=None):
        i = self.metrics.index(metric)
        r = self.radii[i] if explainer is None else self.radii[i, self.explainers.index(explainer)]
        r = r[np.isfinite(r)]
        return float(r.mean()) if r.size else float("nan")

    def n_defined(self, metric, explainer):
        i, j = self._idx(metric, explainer)
        return int((self.status[i, j] == OK).sum())

    def n_failed(self, metric, explainer):
        i, j = self._idx(metric, explainer)
        return int((self.status[i, j] == FAILED).sum())

    def mean_vector(self, metric, explainers):
        return np.array([self.mean(metric, e) for e in explainers])

    def non_trivial(self):
        return [e for e in self.explainers if e not in self.trivial]

    def equals(self, other):
        return (self.metrics == other.metrics and self.explainers == other.explainers
                and self.strategy == other.strategy and self.meta == other.meta
                and np.array_equal(self.scores, other.scores, equal_nan=True)
                and np.array_equal(self.radii, other.radii, equal_nan=True)
                and np.array_equal(self.status, other.status))


# -------------------------------------------------------------- evaluation

@dataclass
class EvalConfig:
    strategy: str = "uniform"
    seed: int = 0
    eta_sq: float = M.DEFAULT_ETA_SQ
    surrogate_output: str = "logit"     # g used by LIP/LSS/CLE/LRC and the adversarial walk
    confidence_output: str = "prob"     # g used by DEL and AD/AI/AG
    lip_normalize: bool = False
    deletion_steps: int = 50
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    cache_dir: str | None = None


def _smoothgrad_rngs(seed, index, anchor_key, count=None):
    if count is None:
        return random_stream(seed, "smoothgrads", index, anchor_key)
    return [random_stream(seed, "smoothgrads", index, anchor_key, k) for k in range(count)]


def _perturbations(image, index, g, cfg):
    cache = None
    if cfg.cache_dir is not None:
        cache = Path(cfg.cache_dir) / cfg.strategy / f"{index:04d}"
        if (cache / "manifest.json").exists():
            pset = load_perturbation_set(cache)
            if np.array_equal(pset.anchor, image) and pset.seed == cfg.seed:
                return pset
    rng = random_stream(cfg.seed, "sampler", cfg.strategy, index)
    pset = sample(cfg.strategy, image, g, cfg.sampler, rng, seed=cfg.seed)
    if cache is not None:
        save_perturbation_set(pset, cache)
    return pset


def evaluate_image(model, image, gaze, index, specs, metric_ids, cfg):
    """All (metric, explainer) cells for one image.

    Returns ``(scores, radii, status, notes)`` arrays shaped
    (metric, explainer) plus a list of diagnostic strings.
    """
    shape = (len(metric_ids), len(specs))
    scores = np.full(shape, np.nan)
    radii = np.full(shape, np.nan)
    status = np.full(shape, FAILED, dtype=np.int8)
    notes = []
    x0 = image.astype(np.float64)
    p0 = model.predict(x0)
    g = ClassLogitModel(model, p0, cfg.surrogate_output)
    gc = ClassLogitModel(model, p0, cfg.confidence_output)
    g0 = g(x0)
    wanted = set(metric_ids)
    need_samples = bool(wanted & set(M.SAMPLE_METRICS))
    need_sample_maps = bool(wanted & {"lip", "lss"})
    pset = samples = sample_values = None
    if need_samples:
        try:
            pset = _perturbations(image, index, g, cfg)
            samples = pset.as_float()
            sample_values = g(samples)
            flagged = [f for f in pset.flags if f]
            if flagged:
                notes.append(f"image {index}: {len(flagged)} sampler fallbacks ({', '.join(sorted(set(flagged)))})")
        except Exception as exc:  # recorded per cell; the run continues
            notes.append(f"image {index}: sampling failed: {exc}")

    for j, spec in enumerate(specs):
        try:
            s0, slope0 = explain_with_slope(spec, g, x0, rng=_smoothgrad_rngs(cfg.seed, index, "anchor"))
            maps = slopes = None
            if need_sample_maps and samples is not None:
                maps, slopes = explain_with_slope(spec, g, samples,
                                                  rng=_smoothgrad_rngs(cfg.seed, index, cfg.strategy, len(samples)))
        except Exception as exc:
            notes.append(f"image {index}, {spec.name}: explainer failed: {exc}")
            continue
        ad_terms = None
        for i, metric in enumerate(metric_ids):
            try:
                if metric in M.SAMPLE_METRICS:
                    if samples is None:
                        raise RuntimeError("no perturbation set")
                    if metric == "lip":
                        val = M.lip(x0, s0, samples, maps, normalize=cfg.lip_normalize)
                    elif metric == "lss":
                        val = M.lss(x0, slope0, g0, samples, slopes, sample_values)
                    elif metric == "cle":
                        val = M.cle(x0, slope0, g0, samples, sample_values)
                    else:
                        val = M.lrc(x0, slope0, g0, samples, sample_values, cfg.eta_sq)
                    radius = M.evaluation_radius(metric, x0, sample_distances=pset.distances)
                elif metric == "del":
                    val = M.deletion_audc(x0, s0, gc, steps=cfg.deletion_steps)[0]
                    radius = M.evaluation_radius("del", x0, s0)
                elif metric in ("ad", "ai", "ag"):
                    if ad_terms is None:
                        ad_terms = dict(zip(("ad", "ai", "ag"), M.ad_ai_ag(x0, s0, gc)))
                    val = ad_terms[metric]
                    radius = M.evaluation_radius(metric, x0, s0)
                    if not np.isfinite(val):
                        raise M.UndefinedMetricError(f"{metric} undefined at confidence {gc(x0)}")
                elif metric in M.GAZE_METRICS:
                    if gaze is None:
                        raise M.UndefinedMetricError("no gaze map")
                    fn = M.plausibility_pcc if metric == "pcc" else M.plausibility_sim
                    val = fn(s0, gaze)
                    radius = float("nan")
                else:
                    raise ValueError(f"unknown metric {metric!r}")
            except M.UndefinedMetricError as exc:
                status[i, j] = UNDEFINED
                notes.append(f"image {index}, {metric}/{spec.name}: undefined ({exc})")
                continue
            except Exception as exc:
                notes.append(f"image {index}, {metric}/{spec.name}: failed ({exc})")
                continue
            scores[i, j] = val
            radii[i, j] = radius
            status[i, j] = OK
    return scores, radii, status, notes


def _image_task(args):
    return evaluate_image(*args)


def run_matrix(model, specs, metric_ids, dataset, cfg, jobs=1, model_checksum=None):
    """Evaluate every explainer under every metric on every image of ``dataset``."""
    specs = [s if isinstance(s, ExplainerSpec) else ExplainerSpec(s) for s in specs]
    metric_ids = list(metric_ids)
    if not specs or not metric_ids:
        raise ValueError("need at least one explainer and one metric")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate explainers: {names}")
    unknown = [m for m in metric_ids if m not in M.METRIC_IDS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {', '.join(M.METRIC_IDS)}")
    if tuple(dataset.image_shape) != tuple(model.input_shape):
        raise ValueError(f"dataset images {dataset.image_shape} do not fit model input {model.input_shape}")
    tasks = [(model, dataset.images[i], None if dataset.gaze is None else dataset.gaze[i], i, specs,
              metric_ids, cfg) for i in range(len(dataset))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_image_task, tasks))
    else:
        results = [_image_task(t) for t in tasks]
    scores = np.stack([r[0] for r in results], axis=2)
    radii = np.stack([r[1] for r in results], axis=2)
    status = np.stack([r[2] for r in results], axis=2)
    for r in results:
        for note in r[3]:
            log.info(note)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "strategy": cfg.strategy,
        "epsilon": cfg.sampler.resolve_epsilon(dataset.image_shape),
        "samples": cfg.sampler.count,
        "eta_sq": cfg.eta_sq,
        "surrogate_output": cfg.surrogate_output,
        "confidence_output": cfg.confidence_output,
        "lip_normalize": cfg.lip_normalize,
        "deletion_steps": cfg.deletion_steps,
        "model_checksum": model_checksum if model_checksum is not None else model.checksum(),
        "dataset_checksum": dataset.checksum(),
        "dataset": dataset.name,
        "images": list(dataset.names),
        "explainer_params": {s.name: s.params for s in specs},
        "trivial": [s.name for s in specs if s.trivial],
    }
    return ScoreTable(metric_ids, names, scores, radii, status, cfg.strategy, meta)


# ------------------------------------------------------------------ analyses

@dataclass
class ConsensusMatrix:
    metrics: list
    explainers: list          # the non-trivial explainers the ranks are taken over
    values: np.ndarray        # symmetric SR matrix, NaN where undefined
    flipped: list             # metrics whose mean scores were negated
    undefined: list           # metric pairs without a defined SR


def consensus(table):
    """Pairwise Spearman correlation of metric mean-score vectors over non-trivial explainers."""
    expl = table.non_trivial()
    if len(expl) < 3:
        raise ValueError(f"consensus needs >= 3 non-trivial explainers, got {len(expl)}")
    vectors = {}
    flipped = []
    for m in table.metrics:
        v = table.mean_vector(m, expl)
        if m in M.HIGHER_IS_BETTER:
            v = -v
            flipped.append(m)
        vectors[m] = v
    k = len(table.metrics)
    values = np.full((k, k), np.nan)
    undefined = []
    for a in range(k):
        for b in range(a, k):
            va, vb = vectors[table.metrics[a]], vectors[table.metrics[b]]
            if not (np.all(np.isfinite(va)) and np.all(np.isfinite(vb))):
                undefined.append((table.metrics[a], table.metrics[b]))
                continue
            try:
                r = spearman(va, vb)
            except UndefinedCorrelationError:
                undefined.append((table.metrics[a], table.metrics[b]))
                continue
            values[a, b] = values[b, a] = r
    return ConsensusMatrix(list(table.metrics), expl, values, flipped, undefined)


def check_comparable(t1, t2):
    if t1.meta.get("model_checksum") != t2.meta.get("model_checksum"):
        raise TableMismatchError("tables come from different models (checksum mismatch)")
    if t1.meta.get("dataset_checksum") != t2.meta.get("dataset_checksum"):
        raise TableMismatchError("tables come from different datasets")
    if t1.explainers != t2.explainers:
        raise TableMismatchError(f"explainer sets differ: {t1.explainers} vs {t2.explainers}")


def consistency(table_uniform, table_adversarial):
    """Pearson correlation of each sample-based metric's mean-score vector across the two strategies."""
    check_comparable(table_uniform, table_adversarial)
    expl = table_uniform.non_trivial()
    out = {}
    for m in M.SAMPLE_METRICS:
        if m not in table_uniform.metrics or m not in table_adversarial.metrics:
            continue
        a = table_uniform.mean_vector(m, expl)
        b = table_adversarial.mean_vector(m, expl)
        try:
            out[m] = pearson(a, b) if np.all(np.isfinite(a)) and np.all(np.isfinite(b)) else float("nan")
        except (UndefinedCorrelationError, ValueError):
            out[m] = float("nan")
    return out


def best_explainers(table):
    """Best non-degenerate mean score per metric (direction-aware), over all explainers."""
    best = {}
    for m in table.metrics:
        vals = [(table.mean(m, e), e) for e in table.explainers]
        vals = [(v, e) for v, e in vals if np.isfinite(v)]
        if not vals:
            continue
        pick = max(vals) if m in M.HIGHER_IS_BETTER else min(vals)
        best[m] = pick[1]
    return best


# ---------------------------------------------------------------- persistence

def _fmt(v):
    return "NaN" if not math.isfinite(v) else repr(float(v))


def means_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for m in table.metrics:
        for e in table.explainers:
            w.writerow([m, e, _fmt(table.mean(m, e)), _fmt(table.mean_radius(m, e)),
                        table.n_defined(m, e), table.n_failed(m, e)])
    return buf.getvalue()


def _opt(v):
    return float(v) if math.isfinite(v) else None


def save_results(table, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").write_text(means_csv(table))
    names = table.meta.get("images") or [str(i) for i in range(table.n_images)]
    with open(out / "raw.jsonl", "w") as fh:
        for n in range(table.n_images):
            for i, m in enumerate(table.metrics):
                for j, e in enumerate(table.explainers):
                    rec = {"image": names[n], "index": n, "metric": m, "explainer": e,
                           "score": _opt(table.scores[i, j, n]), "radius": _opt(table.radii[i, j, n]),
                           "status": _STATUS_NAMES[int(table.status[i, j, n])]}
                    fh.write(json.dumps(rec) + "\n")
    meta = {**table.meta, "schema_version": SCHEMA_VERSION, "metrics": table.metrics,
            "explainers": table.explainers, "strategy": table.strategy, "n_images": table.n_images}
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return out


def load_results(in_dir):
    src = Path(in_dir)
    try:
        with open(src / "meta.json") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ResultsFormatError(f"cannot read {src / 'meta.json'}: {exc}") from None
    if not isinstance(meta, dict) or meta.get("schema_version") != SCHEMA_VERSION:
        raise ResultsFormatError(f"{src}: schema version {meta.get('schema_version') if isinstance(meta, dict) else None}"
                                 f", expected {SCHEMA_VERSION}")
    try:
        metrics = list(meta.pop("metrics"))
        explainers = list(meta.pop("explainers"))
        strategy = meta.pop("strategy")
        n = int(meta.pop("n_images"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ResultsFormatError(f"{src}: incomplete metadata ({exc})") from None
    meta["strategy"] = strategy
    shape = (len(metrics), len(explainers), n)
    scores = np.full(shape, np.nan)
    radii = np.full(shape, np.nan)
    status = np.full(shape, FAILED, dtype=np.int8)
    seen = np.zeros(shape, dtype=bool)
    with open(src / "raw.jsonl") as fh:
        for line in fh:
            try:
                rec = json.loads(line)
                i, j, k = metrics.index(rec["metric"]), explainers.index(rec["explainer"]), rec["index"]
                scores[i, j, k] = np.nan if rec["score"] is None else rec["score"]
                radii[i, j, k] = np.nan if rec["radius"] is None else rec["radius"]
                status[i, j, k] = _STATUS_CODES[rec["status"]]
                seen[i, j, k] = True
            except (ValueError, KeyError, IndexError) as exc:
                raise ResultsFormatError(f"{src / 'raw.jsonl'}: bad record ({exc})") from None
    if not seen.all():
        raise ResultsFormatError(f"{src / 'raw.jsonl'}: missing records")
    return ScoreTable(metrics, explainers, scores, radii, status, strategy, meta)


def read_means_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["mean_score"] = float(r["mean_score"])
        r["mean_radius"] = float(r["mean_radius"])
        r["n_defined"] = int(r["n_defined"])
        r["n_failed"] = int(r["n_failed"])
    return rows
