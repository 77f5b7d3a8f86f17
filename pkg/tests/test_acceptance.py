"""Acceptance criteria, one test per criterion, each reporting PASS/FAIL in the terminal summary.

The desk-scale benchmark (50 images, 8 explainers, every metric, 50
samples per image, both strategies) is run once per session and shared
by the criteria that need it.
"""
import itertools
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import criterion
from xaimeter import benchmark as B
from xaimeter import metrics as M
from xaimeter.datasets import gen_synthetic_dataset
from xaimeter.explainers import EXPLAINER_KINDS, ExplainerSpec, explain_integrated_gradients, explain_with_slope
from xaimeter.model import (AvgPool2D, Classifier, ClassLogitModel, Conv2D, Dense, Flatten, MaxPool2D, ReLU,
                            linear_classifier, save_model)
from xaimeter.numeric import pearson, random_stream, spearman, trapezoid_auc
from xaimeter.perturbation import SamplerConfig, _draw_start, sample_adversarial, sample_uniform, seed_perturbation

DESK_BUDGET_S = 15 * 60


@pytest.fixture(scope="module")
def desk_run(toy_model, eval_set, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    specs = [ExplainerSpec(k) for k in EXPLAINER_KINDS]
    tables, elapsed = {}, {}
    for strategy in ("uniform", "adversarial"):
        t0 = time.perf_counter()
        tables[strategy] = B.run_matrix(toy_model, specs, M.METRIC_IDS, eval_set,
                                        B.EvalConfig(strategy=strategy, seed=7))
        elapsed[strategy] = time.perf_counter() - t0
        B.save_results(tables[strategy], out / strategy)
    return tables, elapsed, out


# ---------------------------------------------------------------- 1

@criterion(1, "linear-oracle collapse (CLE = LRC = LSS = midpoint gap = 0 on an affine model)")
def test_c1_linear_oracle_collapse():
    t0 = time.perf_counter()
    r = random_stream(1, "c1")
    clf = linear_classifier(r.normal(size=(3, 32, 32, 3)), r.normal(size=3), input_scale=1 / 255)
    ds = gen_synthetic_dataset(10, 32, 3, seed=3)
    worst = 0.0
    for i, img in enumerate(ds.images):
        x0 = img.astype(np.float64)
        g = ClassLogitModel(clf, clf.predict(x0))
        g0 = g(x0)
        samples = sample_uniform(img, SamplerConfig(count=50), random_stream(1, "c1-samples", i)).as_float()
        values = g(samples)
        for kind in ("grads", "integrated-gradients", "smoothgrads"):
            spec = ExplainerSpec(kind)
            _, slope0 = explain_with_slope(spec, g, x0, random_stream(1, "sg", i))
            _, slopes = explain_with_slope(spec, g, samples, [random_stream(1, "sg", i, k) for k in range(50)])
            e0 = M.LinearSurrogate.build(x0, slope0, g0)
            gaps = [M.midpoint_gap(e0, M.LinearSurrogate.build(xk, sk, gk))
                    for xk, sk, gk in zip(samples, slopes, values)]
            vals = [M.cle(x0, slope0, g0, samples, values),
                    M.lrc(x0, slope0, g0, samples, values),
                    M.lss(x0, slope0, g0, samples, slopes, values), max(gaps)]
            worst = max(worst, *vals)
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-9, f"largest value {worst:.3e} > 1e-9"
    assert elapsed < 10, f"runtime {elapsed:.1f}s >= 10s"
    return f"max |value| {worst:.1e}, {elapsed:.1f}s"


# ---------------------------------------------------------------- 2

@criterion(2, "trivial-defeat separation (LIP = 0 for Fake-CAM/CB-CAM; LSS(Fake-CAM) > 0 on >= 95%)")
def test_c2_trivial_defeat(desk_run):
    tables, _, _ = desk_run
    parts = []
    for strategy, t in tables.items():
        for e in ("fake-cam", "cb-cam"):
            lip = t.raw("lip", e)
            assert t.n_defined("lip", e) == t.n_images and np.all(lip == 0.0), f"{strategy} LIP({e}) not all 0"
        lss = t.raw("lss", "fake-cam")
        frac = float(np.mean(lss > 0))
        parts.append(f"{strategy} LSS>0 on {frac:.0%}")
        assert frac >= 0.95, f"{strategy}: LSS(fake-cam) > 0 on only {frac:.0%} of images"
    return ", ".join(parts)


# ---------------------------------------------------------------- 3

def _random_net(rng):
    """conv -> relu -> maxpool -> conv -> relu -> avgpool -> flatten -> dense, < 1000 parameters."""
    layers = [
        Conv2D(rng.normal(0, 0.5, (3, 3, 3, 4)), rng.normal(0, 0.1, 4), pad=1, name="c1"),
        ReLU(name="r1"),
        MaxPool2D(2, name="p1"),
        Conv2D(rng.normal(0, 0.5, (3, 3, 4, 5)), rng.normal(0, 0.1, 5), pad=1, name="c2"),
        ReLU(name="r2"),
        AvgPool2D(2, name="p2"),
        Flatten(name="f"),
        Dense(rng.normal(0, 0.5, (20, 3)), rng.normal(0, 0.1, 3), name="d"),
    ]
    return Classifier(layers, (8, 8, 3), 3, input_scale=1.0)


def _pattern(clf, x):
    _, caches, _ = clf.trace(x[None])
    parts = []
    for layer, cache in zip(clf.layers, caches):
        if layer.kind == "relu":
            parts.append(cache.ravel())
        elif layer.kind == "max-pool":
            parts.append(np.asarray(cache[0]).ravel())
    return np.concatenate([p.astype(np.int64) for p in parts])


@criterion(3, "gradient fidelity (autodiff vs central differences, rel. error < 1e-7, 100 probes)")
def test_c3_gradient_fidelity():
    """Full input-gradient vector of a class logit against coordinate-wise central differences.

    A probe whose stencil crosses a ReLU or max-pool switch is redrawn: the
    network is only piecewise smooth and a difference across a kink is not a
    derivative.
    """
    rng = random_stream(3, "c3")
    h = 1e-4
    done, skipped, worst = 0, 0, 0.0
    while done < 100:
        clf = _random_net(rng)
        assert clf.n_params <= 1000
        x = rng.normal(size=(8, 8, 3))
        g = ClassLogitModel(clf, int(rng.integers(3)))
        pat = _pattern(clf, x)
        fd = np.empty(x.size)
        kink = False
        for i in range(x.size):
            e = np.zeros(x.size)
            e[i] = h
            e = e.reshape(x.shape)
            if not (np.array_equal(pat, _pattern(clf, x + e)) and np.array_equal(pat, _pattern(clf, x - e))):
                kink = True
                break
            fd[i] = (g(x + e) - g(x - e)) / (2 * h)
        if kink:
            skipped += 1
            continue
        ad = g.grad(x).ravel()
        scale = max(np.linalg.norm(ad), np.linalg.norm(fd))
        if scale == 0.0:
            skipped += 1  # every unit dead: nothing to compare
            continue
        worst = max(worst, np.linalg.norm(ad - fd) / scale)
        done += 1
    assert worst < 1e-7, f"worst relative error {worst:.2e}"
    return f"worst rel. error {worst:.1e}, {skipped} probes redrawn"


# ---------------------------------------------------------------- 4

@criterion(4, "sampler contracts (uniform integrality/distances/KS; adversarial stopping rule; |Phi| = 3 px)")
def test_c4_sampler_contracts(toy_model, eval_set):
    img = eval_set.images[0]
    n = img.size
    cfg = SamplerConfig(count=1000)
    eps = cfg.resolve_epsilon(img.shape)
    ps = sample_uniform(img, cfg, random_stream(4, "c4-uniform"))
    assert ps.samples.dtype == np.uint8 and ps.samples.min() >= 0 and ps.samples.max() <= 255
    assert np.all(ps.distances > 0) and np.all(ps.distances <= eps + 0.5 * math.sqrt(n))
    radial = (ps.raw_norms / eps) ** n
    ks = stats.kstest(radial, "uniform")
    assert ks.pvalue > 0.01, f"KS p-value {ks.pvalue:.3g}"

    rng = random_stream(4, "c4-phi")
    for _ in range(200):
        phi = seed_perturbation(img, 3, rng)
        assert int(np.any(phi != 0, axis=2).sum()) == 3
        d, phi = _draw_start(img, eps, SamplerConfig(), rng)
        assert int(np.any(phi != 0, axis=2).sum()) == 3 and np.linalg.norm(phi) <= d / 2 + 1e-9

    checked = 0
    for i in (1, 2):
        x0 = eval_set.images[i]
        g = ClassLogitModel(toy_model, toy_model.predict(x0.astype(np.float64)))
        adv = sample_adversarial(x0, g, SamplerConfig(count=25), random_stream(4, "c4-adv", i))
        assert np.all(adv.targets > 0) and np.all(adv.targets <= eps)
        for k in range(len(adv)):
            assert adv.raw_norms[k] <= adv.targets[k] + 1e-9
            if adv.flags[k] == "":
                assert adv.next_norms[k] > adv.targets[k], "walk stopped before leaving its ball"
                checked += 1
            assert adv.distances[k] <= adv.targets[k] + 0.5 * math.sqrt(n)
    assert checked > 0
    return f"KS p = {ks.pvalue:.3f}, {checked} adversarial stops verified"


# ---------------------------------------------------------------- 5

def _pearson_oracle(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def _rank_oracle(a):
    ranks = []
    for x in a:
        less = sum(1 for y in a if y < x)
        equal = sum(1 for y in a if y == x)
        ranks.append(less + (equal + 1) / 2)
    return ranks


def _deletion_oracle(x0, sal, g, steps=50):
    """Enumerate every pixel subset; at each step the deleted set is the unique top-ranked one."""
    h, w = sal.shape
    pix = list(range(h * w))
    key = {p: (-sal.flat[p], p) for p in pix}
    xs, ys = [], []
    for t in range(steps + 1):
        frac = 0.5 * t / steps
        count = math.floor(frac * h * w + 1e-9)
        chosen = None
        for subset in itertools.combinations(pix, count):
            rest = [p for p in pix if p not in subset]
            if all(key[a] < key[b] for a in subset for b in rest):
                assert chosen is None
                chosen = subset
        img = x0.copy()
        for p in chosen:
            img[p // w, p % w, :] = 0.0
        xs.append(frac)
        ys.append(g(img))
    area = 0.0
    for k in range(steps):
        area += (xs[k + 1] - xs[k]) * (ys[k] + ys[k + 1]) / 2
    return area / (xs[-1] - xs[0])


def _sample_metric_oracles(x0, s0, g0, xs, ss, gs, eta_sq):
    def e(anchor, s, base, x):
        return sum(si * (xi - ai) for si, xi, ai in zip(s, x, anchor)) + base

    def norm(a, b):
        return math.sqrt(sum((p - q) ** 2 for p, q in zip(a, b)))

    lip = lss = 0.0
    cles, lrcs = [], []
    for xk, sk, gk in zip(xs, ss, gs):
        d = norm(x0, xk)
        lip = max(lip, norm(s0, sk) / d)
        mid = [(p + q) / 2 for p, q in zip(x0, xk)]
        lss = max(lss, abs(e(x0, s0, g0, mid) - e(xk, sk, gk, mid)) / d)
        c = abs(e(x0, s0, g0, xk) - gk)
        cles.append(c)
        lrcs.append(c / (abs(g0 - gk) + eta_sq))
    return lip, lss, sum(cles) / len(cles), sum(lrcs) / len(lrcs)


@criterion(5, "brute-force oracle equivalence (deletion AUDC, Spearman/Pearson, LIP/LSS/CLE/LRC)")
def test_c5_bruteforce_oracles():
    rng = random_stream(5, "c5")
    worst_del = 0.0
    for trial in range(30):
        clf = linear_classifier(rng.normal(size=(2, 2, 2, 3)), rng.normal(size=2), input_scale=1 / 255)
        x0 = rng.integers(0, 256, size=(2, 2, 3)).astype(np.float64)
        g = ClassLogitModel(clf, 0, "prob")
        sal = rng.integers(0, 3, size=(2, 2)).astype(np.float64) if trial % 2 else rng.normal(size=(2, 2))
        audc = M.deletion_audc(x0, sal, g)[0]
        worst_del = max(worst_del, abs(audc - _deletion_oracle(x0, sal, g)))
    assert worst_del <= 1e-9, f"deletion AUDC off by {worst_del:.2e}"

    worst_corr = 0.0
    for trial in range(200):
        n = int(rng.integers(3, 12))
        a = rng.integers(0, 4, size=n).astype(float) if trial % 2 else rng.normal(size=n)
        b = rng.integers(0, 4, size=n).astype(float) if trial % 3 else rng.normal(size=n)
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        worst_corr = max(worst_corr, abs(pearson(a, b) - _pearson_oracle(list(a), list(b))),
                         abs(spearman(a, b) - _pearson_oracle(_rank_oracle(list(a)), _rank_oracle(list(b)))))
    assert worst_corr <= 1e-12, f"correlation off by {worst_corr:.2e}"

    worst_sample = 0.0
    for _ in range(20):
        shape = (3, 3, 3)
        x0 = rng.integers(0, 256, size=shape).astype(np.float64)
        xs = np.clip(x0 + rng.integers(-20, 21, size=(5,) + shape), 0, 255)
        xs[:, 0, 0, 0] = (x0[0, 0, 0] + 1) % 256  # keep every sample distinct from the anchor
        s0 = rng.normal(size=shape)
        ss = rng.normal(size=(5,) + shape)
        g0 = float(rng.normal())
        gs = rng.normal(size=5)
        got = (M.lip(x0, s0, xs, ss), M.lss(x0, s0, g0, xs, ss, gs),
               M.cle(x0, s0, g0, xs, gs), M.lrc(x0, s0, g0, xs, gs, 1e-6))
        want = _sample_metric_oracles(list(x0.ravel()), list(s0.ravel()), g0,
                                      [list(x.ravel()) for x in xs], [list(s.ravel()) for s in ss], list(gs), 1e-6)
        worst_sample = max(worst_sample, max(abs(p - q) / max(1.0, abs(q)) for p, q in zip(got, want)))
    assert worst_sample <= 1e-12, f"sample metrics off by {worst_sample:.2e}"
    return f"AUDC {worst_del:.1e}, corr {worst_corr:.1e}, sample metrics {worst_sample:.1e}"


# ---------------------------------------------------------------- 6

@criterion(6, "integrated-gradients completeness (< 2% at m = 50; error(50) < error(5))")
def test_c6_ig_completeness(toy_model, eval_set):
    e5s, e50s = [], []
    for img in eval_set.images[:10]:
        x0 = img.astype(np.float64)
        g = ClassLogitModel(toy_model, toy_model.predict(x0))
        delta = g(x0) - g(np.zeros_like(x0))
        for m, acc in ((5, e5s), (50, e50s)):
            acc.append(abs(explain_integrated_gradients(g, x0, steps=m).sum() - delta) / abs(delta))
    e5s, e50s = np.array(e5s), np.array(e50s)
    within = int((e50s < 0.02).sum())
    assert np.all(e50s < e5s), f"error grew from m=5 to m=50 on {int((e50s >= e5s).sum())} images"
    assert within == len(e50s), (f"error(m=50) < 2% on {within}/{len(e50s)} images "
                                 f"(worst {e50s.max():.4f}, median {np.median(e50s):.4f})")
    return f"worst error(50) {e50s.max():.2e}"


# ---------------------------------------------------------------- 7

@criterion(7, "evaluation-radius ordering (mean R(CLE) = mean R(LRC) <= eps < mean R(DEL), mean R(AD))")
def test_c7_radius_ordering(desk_run):
    tables, _, _ = desk_run
    parts, problems = [], []
    for strategy, t in tables.items():
        eps = t.meta["epsilon"]
        r_cle, r_lrc = t.mean_radius("cle"), t.mean_radius("lrc")
        non_trivial = t.non_trivial()
        r_del = np.mean([t.mean_radius("del", e) for e in non_trivial])
        r_ad = np.mean([t.mean_radius("ad", e) for e in non_trivial])
        parts.append(f"{strategy}: R(CLE)={r_cle:.2f} R(DEL)={r_del:.0f} R(AD)={r_ad:.0f} eps={eps:.2f}")
        assert r_cle == r_lrc
        assert r_del > eps and r_ad > eps
        if not r_cle <= eps:
            problems.append(f"{strategy} mean R(CLE) {r_cle:.3f} > eps {eps:.3f}")
    assert not problems, "; ".join(problems) + " (post-quantisation distances; see README)"
    return "; ".join(parts)


# ---------------------------------------------------------------- 8

@criterion(8, "AD trivial winner (Fake-CAM has the minimum mean AD of all eight explainers)")
def test_c8_fake_cam_wins_ad(desk_run):
    tables, _, _ = desk_run
    t = tables["uniform"]
    ad = {e: t.mean("ad", e) for e in t.explainers}
    best = min(ad, key=ad.get)
    assert best == "fake-cam", f"minimum AD is {best} ({ad[best]:.3f}); fake-cam {ad['fake-cam']:.3f}"
    runner_up = sorted(v for e, v in ad.items() if e != "fake-cam")[0]
    return f"AD(fake-cam) {ad['fake-cam']:.2f} vs next best {runner_up:.2f}"


# ---------------------------------------------------------------- 9

def _cli(*args):
    return subprocess.run([sys.executable, "-m", "xaimeter", *args], capture_output=True, text=True)


@criterion(9, "determinism (--jobs 1 == --jobs 4 byte for byte) and desk-scale runtime < 15 min")
def test_c9_determinism_and_runtime(desk_run, toy_model, tmp_path):
    _, elapsed, _ = desk_run
    model = tmp_path / "model.xaim"
    save_model(toy_model, model)
    for strategy, n in (("uniform", 8), ("adversarial", 4)):
        outs = []
        for jobs in (1, 4):
            out = tmp_path / f"{strategy}-{jobs}"
            r = _cli("evaluate", "--model", str(model), "--synthetic", str(n), "--data-seed", "7",
                     "--strategy", strategy, "--seed", "7", "--jobs", str(jobs), "--out", str(out))
            assert r.returncode == 0, r.stderr
            outs.append(out)
        for name in ("scores.csv", "raw.jsonl", "meta.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), f"{strategy} {name} differs"
    total = sum(elapsed.values())
    assert total < DESK_BUDGET_S, f"desk-scale run took {total:.0f}s"
    return f"desk run {elapsed['uniform']:.0f}s uniform + {elapsed['adversarial']:.0f}s adversarial"


# ---------------------------------------------------------------- 10

@criterion(10, "consistency pipeline (self-consistency = 1; LSS-vs-LIP line in the report)")
def test_c10_consistency_pipeline(desk_run, tmp_path):
    tables, _, out = desk_run
    for t in tables.values():
        cons = B.consistency(t, t)
        assert set(cons) == set(M.SAMPLE_METRICS)
        assert all(abs(v - 1.0) < 1e-12 for v in cons.values()), cons
    r = _cli("report", "--tables", str(out / "uniform"), str(out / "adversarial"), "--out", str(tmp_path / "rep"))
    assert r.returncode == 0, r.stderr
    summary = (tmp_path / "rep" / "summary.txt").read_text()
    line = next((ln for ln in summary.splitlines() if "LSS vs LIP consistency" in ln), None)
    assert line is not None
    assert (tmp_path / "rep" / "consistency.csv").exists()
    return line.strip()
