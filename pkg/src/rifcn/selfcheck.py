"""Numerical self-checks: adjoint identities, finite-difference gradients and
metric oracles. Each suite returns its worst error so callers can report it."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_ops as ops
from .metrics import ConfusionMatrix, erode_boundary_gt, f1_scores, iou, overall_accuracy
from .model import IGNORE, ForwardStreamSpec, build_model, backprop, compute_loss, forward, predict


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tolerance


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_strided_geometry(rng: np.random.Generator):
    """Random (conv input shape, conv output shape, weight shape, stride, pad)."""
    n = int(rng.integers(1, 3))
    cin, cout = (int(v) for v in rng.integers(1, 5, size=2))
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, k))
    ho, wo = (int(v) for v in rng.integers(1, 6, size=2))
    h = stride * (ho - 1) + k - 2 * pad
    w = stride * (wo - 1) + k - 2 * pad
    if h < 1 or w < 1:
        pad = 0
        h, w = stride * (ho - 1) + k, stride * (wo - 1) + k
    return (n, cin, h, w), (n, cout, ho, wo), (cout, cin, k, k), stride, pad


def adjoint_suite(trials: int = 100, seed: int = 0, deconv: Callable = ops.deconv2d) -> SuiteResult:
    """<y, conv_s(x)> against <deconv_s(y), x> over random geometries (f64)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(trials):
        xs, ys, ws, s, p = random_strided_geometry(rng)
        w = rng.standard_normal(ws)
        x, y = rng.standard_normal(xs), rng.standard_normal(ys)
        cx = ops.conv2d(x, ops.ConvKernel(w, np.zeros(ws[0]), s, p))
        dy = deconv(y, ops.ConvKernel(w, np.zeros(ws[1]), s, p, transposed=True))
        lhs, rhs = float(np.vdot(y, cx)), float(np.vdot(dy, x))
        worst = max(worst, abs(lhs - rhs) / (abs(lhs) + 1e-30))
    return SuiteResult("conv/deconv adjoint", worst, 1e-10, time.perf_counter() - start)


def transposed_deconv_fault(x, k):
    """Deliberately wrong deconvolution (kernel axes swapped); mutation-test hook."""
    bad = ops.ConvKernel(np.ascontiguousarray(k.weights.transpose(0, 1, 3, 2)),
                         k.bias, k.stride, k.padding, transposed=True)
    return ops.deconv2d(x, bad)


def _fd_entries(f, arr, rng, count, h=1e-5):
    """Central differences of scalar ``f`` at ``count`` random entries of ``arr``."""
    out = []
    for _ in range(count):
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        out.append((idx, _fd_entries_at(f, arr, idx, h)))
    return out


def kernel_gradient_suite(seed: int = 0, samples: int = 12) -> SuiteResult:
    """Finite-difference checks of every *_backward kernel (f64)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()

    def check(analytic, numeric_list):
        nonlocal worst
        for idx, num in numeric_list:
            worst = max(worst, rel_err(float(analytic[idx]), num))

    for transposed in (False, True):
        for _ in range(3):
            xs, ys, ws, s, p = random_strided_geometry(rng)
            w = rng.standard_normal(ws)
            if transposed:
                x = rng.standard_normal(ys)
                k = ops.ConvKernel(w, rng.standard_normal(ws[1]), s, p, transposed=True)
                fwd, bwd = ops.deconv2d, ops.deconv2d_backward
            else:
                x = rng.standard_normal(xs)
                k = ops.ConvKernel(w, rng.standard_normal(ws[0]), s, p)
                fwd, bwd = ops.conv2d, ops.conv2d_backward
            g = rng.standard_normal(fwd(x, k).shape)
            gx, gw, gb = bwd(x, k, g)
            f = lambda: float(np.vdot(fwd(x, k), g))  # noqa: E731
            check(gx, _fd_entries(f, x, rng, samples))
            check(gw, _fd_entries(f, k.weights, rng, samples))
            check(gb, _fd_entries(f, k.bias, rng, samples))

    # max-pool away from ties
    x = rng.permutation(4 * 6 * 6).reshape(1, 4, 6, 6).astype(np.float64) * 0.01
    y, idx = ops.maxpool2d(x)
    g = rng.standard_normal(y.shape)
    gx = ops.maxpool2d_backward(idx, g, x.shape)
    check(gx, _fd_entries(lambda: float(np.vdot(ops.maxpool2d(x)[0], g)), x, rng, samples * 2))

    for kind in ("relu", "sigmoid"):
        x = rng.standard_normal((1, 3, 5, 5))
        x[np.abs(x) < 1e-3] = 0.5
        g = rng.standard_normal(x.shape)
        gx = ops.activation_backward(kind, x, g)
        f = lambda: float(np.vdot(ops.activation(kind, x), g))  # noqa: E731
        check(gx, _fd_entries(f, x, rng, samples))
    return SuiteResult("kernel finite differences", worst, 1e-6, time.perf_counter() - start)


def activation_pattern(model, x) -> list[np.ndarray]:
    """ReLU on/off masks and max-pool argmax indices of one forward pass."""
    _, cache = forward(model, x)
    preacts = (cache.block_preacts, cache.fuse_fwd_pre, cache.fuse_bwd_pre)
    parts = [v > 0 for d in preacts for _, v in sorted(d.items())]
    return parts + [idx for _, (idx, _) in sorted(cache.pools.items())]


def crosses_kink(model, x, arr, idx, h) -> bool:
    """True when moving ``arr[idx]`` by +-h flips a ReLU or a max-pool winner,
    i.e. the central-difference stencil spans a non-differentiable point."""
    orig = arr[idx]
    arr[idx] = orig + h
    hi = activation_pattern(model, x)
    arr[idx] = orig - h
    lo = activation_pattern(model, x)
    arr[idx] = orig
    return any(not np.array_equal(a, b) for a, b in zip(hi, lo))


def model_gradient_check(n_params: int = 200, seed: int = 0, h: float = 1e-5,
                         max_redraws: int = 20):
    """Finite-difference check of the full network on the tiny reference config.

    Entries whose stencil crosses a ReLU kink or a max-pool tie are redrawn
    from the same parameter tensor. Returns
    ``(max_rel_err, per_group_worst, checked_count, redrawn_count)``.
    """
    rng = np.random.default_rng(seed)
    spec = ForwardStreamSpec(levels=2, block_widths=(4, 8, 16), in_channels=3)
    model = build_model(spec, 3, seed=seed, dtype=np.float64)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p[...] = rng.uniform(-0.1, 0.1, size=p.shape)
    x = rng.random((1, 3, 16, 16))
    labels = rng.integers(0, 3, size=(1, 16, 16))
    probs, cache = forward(model, x)
    grads = backprop(model, cache, probs, labels)
    loss = lambda: compute_loss(predict(model, x), labels)  # noqa: E731

    names = list(model.params)
    per = max(1, -(-n_params // len(names)))
    worst, groups, count, redrawn = 0.0, {}, 0, 0
    for name in names:
        arr = model.params[name]
        for _ in range(per):
            for _ in range(max_redraws):
                idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
                if not crosses_kink(model, x, arr, idx, h):
                    break
                redrawn += 1
            else:
                raise RuntimeError(f"no differentiable entry found in {name}")
            num = _fd_entries_at(loss, arr, idx, h)
            err = rel_err(float(grads[name][idx]), num)
            group = name.rsplit(".", 1)[0]
            groups[group] = max(groups.get(group, 0.0), err)
            worst = max(worst, err)
            count += 1
    return worst, groups, count, redrawn


def _fd_entries_at(f, arr, idx, h):
    orig = arr[idx]
    arr[idx] = orig + h
    fp = f()
    arr[idx] = orig - h
    fm = f()
    arr[idx] = orig
    return (fp - fm) / (2 * h)


def model_gradient_suite(n_params: int = 200, seed: int = 0) -> SuiteResult:
    start = time.perf_counter()
    worst, _, _, _ = model_gradient_check(n_params, seed)
    return SuiteResult("end-to-end gradient", worst, 1e-4, time.perf_counter() - start)


def naive_confusion(truth, pred, m):
    counts = np.zeros((m, m), dtype=np.int64)
    for t, p in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        if t != IGNORE:
            counts[t, p] += 1
    return counts


def naive_scores(counts):
    """Per-class (precision, recall, f1, iou) and OA by explicit loops."""
    m = len(counts)
    out = []
    for c in range(m):
        tp = int(counts[c][c])
        fp = sum(int(counts[r][c]) for r in range(m)) - tp
        fn = sum(int(counts[c][r]) for r in range(m)) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        union = tp + fp + fn
        out.append((prec, rec, f1, tp / union if union else 1.0))
    total = sum(int(v) for row in counts for v in row)
    oa = sum(int(counts[c][c]) for c in range(m)) / total
    return out, oa


def metric_oracle_suite(trials: int = 50, size: int = 64, m: int = 6, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(trials):
        truth = rng.integers(0, m, size=(size, size))
        pred = rng.integers(0, m, size=(size, size))
        truth[rng.random(truth.shape) < 0.05] = IGNORE
        cm = ConfusionMatrix(m).accumulate(truth, pred)
        ref = naive_confusion(truth, pred, m)
        if not np.array_equal(cm.counts, ref):
            return SuiteResult("metric oracles", float("inf"), 1e-12)
        p, r, f1 = f1_scores(cm)
        scores, oa = naive_scores(ref)
        for c, (np_, nr, nf, ni) in enumerate(scores):
            worst = max(worst, abs(p[c] - np_), abs(r[c] - nr), abs(f1[c] - nf),
                        abs(iou(truth, pred, c) - ni))
        worst = max(worst, abs(overall_accuracy(cm) - oa))
    return SuiteResult("metric oracles", worst, 1e-12, time.perf_counter() - start)


def brute_force_erosion(truth, radius=3):
    h, w = truth.shape
    out = truth.copy()
    r = int(radius)
    for i in range(h):
        for j in range(w):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy * dy + dx * dx > radius * radius:
                        continue
                    a, b = i + dy, j + dx
                    if 0 <= a < h and 0 <= b < w:
                        q = truth[a, b]
                        if q != IGNORE and q != truth[i, j]:
                            out[i, j] = IGNORE
    return out


def erosion_suite(trials: int = 5, size: int = 24, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(trials):
        truth = rng.integers(0, 3, size=(size // 4, size // 4)).repeat(4, 0).repeat(4, 1)
        truth = truth.astype(np.uint8)
        mismatches += int((erode_boundary_gt(truth, 3) != brute_force_erosion(truth, 3)).sum())
    return SuiteResult("boundary erosion", float(mismatches), 0.0, time.perf_counter() - start)


def run_all(fault: str | None = None, log=print) -> SuiteResult | None:
    """Run every suite, logging worst errors; return the first failure or None."""
    deconv = transposed_deconv_fault if fault == "transpose-deconv" else ops.deconv2d
    suites = [
        lambda: adjoint_suite(deconv=deconv),
        kernel_gradient_suite,
        model_gradient_suite,
        metric_oracle_suite,
        erosion_suite,
    ]
    failed = None
    for suite in suites:
        res = suite()
        status = "ok" if res.passed else "FAIL"
        log(f"{res.name:<28} max_err={res.max_error:.3e} tol={res.tolerance:.0e} "
            f"[{status}] {res.seconds:.2f}s")
        if not res.passed and failed is None:
            failed = res
    return failed
