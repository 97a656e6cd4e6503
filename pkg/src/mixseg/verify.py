"""Runtime self-checks for the numeric core.

Every check re-derives its expected answer from an independent oracle
(finite differences, brute-force set arithmetic, closed forms) so a
silent regression in the fast path cannot also corrupt the reference.
`run_all` prints one PASS/FAIL line per property and returns False if
anything failed; the CLI turns that into a nonzero exit.
"""

from __future__ import annotations

import io
import math
import os
import tempfile
import time
from typing import Callable

import numpy as np

from . import tensor as T
from . import nn
from .checkpoint import save, load
from .evaluation import accumulate, miou, new_confusion
from .mixing import decouple_soft, mix_inputs
from .tensor import Tensor, grad_check
from .trainer import poly_lr

GRAD_TOL = 1e-4
MODEL_GRAD_TOL = 1e-3


def _nudge(x: np.ndarray, away: float, margin: float) -> np.ndarray:
    lo, hi = away - margin, away + margin
    mask = (x > lo) & (x < hi)
    out = x.copy()
    out[mask] = np.where(x[mask] >= away, hi, lo)
    return out


def _op_cases(rng: np.random.Generator):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 4))
    yield "add", lambda p, q: T.tsum(T.add(p, q)), (a, b)
    yield "mul", lambda p, q: T.tsum(T.mul(p, q)), (a, b)
    yield "relu", lambda p: T.tsum(T.relu(p)), (_nudge(a, 0.0, 0.05),)
    yield "exp", lambda p: T.tsum(T.exp(p)), (a,)
    yield "log", lambda p: T.tsum(T.log(p)), (np.abs(a) + 0.5,)
    yield "clamp_min", lambda p: T.tsum(T.clamp_min(p, 0.2)), (_nudge(a, 0.2, 0.05),)
    yield "matmul", lambda p, q: T.tsum(T.matmul(p, q)), (a, m)
    yield "softmax", lambda p: T.tsum(T.mul(T.softmax(p, axis=1), Tensor(w))), (a,)
    yield "mean", lambda p: T.tmean(p), (a,)


def check_op_gradients(seeds: int = 5) -> tuple[bool, str]:
    worst = 0.0
    worst_name = ""
    for seed in range(seeds):
        rng = np.random.default_rng((90, seed))
        for name, f, arrays in _op_cases(rng):
            inputs = [Tensor(x, requires_grad=True) for x in arrays]
            err = grad_check(f, inputs)
            if err > worst:
                worst, worst_name = err, name
    ok = worst < GRAD_TOL
    return ok, f"max rel err {worst:.3e} ({worst_name}), tol {GRAD_TOL:.0e}"


def check_conv_gradient() -> tuple[bool, str]:
    rng = np.random.default_rng((91, 0))
    x = Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    err = grad_check(lambda xx, ww, bb: T.tmean(nn.conv2d(xx, ww, bb)), [x, w, b])
    return err < GRAD_TOL, f"max rel err {err:.3e}, tol {GRAD_TOL:.0e}"


def check_model_gradient() -> tuple[bool, str]:
    model = nn.SegModel(num_classes=3, enc_channels=(4, 6, 8),
                        psp_bins=(1, 2), embed_dim=4, seed=7)
    rng = np.random.default_rng((92, 0))
    image = Tensor(rng.standard_normal((3, 12, 12)) * 0.5)
    labels = rng.integers(0, 3, size=(12, 12))
    params = list(model.params.values())

    def f(*_):
        probs, _deep = nn.forward_segnet(model, image)
        return nn.nll_from_probs(probs, labels)

    coords = []
    flat_sizes = [p.size for p in params]
    for _ in range(10):
        pi = int(rng.integers(0, len(params)))
        coords.append((pi, int(rng.integers(0, flat_sizes[pi]))))
    err = grad_check(f, params, coords=coords)
    return err < MODEL_GRAD_TOL, f"max rel err {err:.3e}, tol {MODEL_GRAD_TOL:.0e}"


def check_decouple_inverse(cases: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng((93, 0))
    worst = 0.0
    for _ in range(cases):
        c = int(rng.choice([2, 4, 8]))
        h = int(rng.integers(2, 6))
        w = int(rng.integers(2, 6))
        mask = rng.integers(0, c, size=(h, w))
        raw = rng.random((c, h, w)) + 1e-3
        y_u = raw / raw.sum(axis=0, keepdims=True)
        lam = float(rng.uniform(0.01, 0.99))
        onehot = np.zeros((c, h, w))
        for k in range(c):
            onehot[k][mask == k] = 1.0
        y_m = lam * onehot + (1.0 - lam) * y_u
        q = decouple_soft(y_m, mask, lam)
        worst = max(worst, float(np.abs(q - y_u).max()))
    return worst <= 1e-12, f"{cases} cases, worst abs err {worst:.3e}, tol 1e-12"


def check_attention() -> tuple[bool, str]:
    rng = np.random.default_rng((94, 0))
    c, d, h, w = 5, 4, 3, 3
    coarse = Tensor(rng.standard_normal((c, h, w)))
    ref = Tensor(rng.standard_normal((c, h, w)))
    wq = Tensor(rng.standard_normal((d, c)))
    wk = Tensor(rng.standard_normal((d, c)))
    wv = Tensor(rng.standard_normal((d, c)))
    wo = Tensor(rng.standard_normal((c, d)))
    _, aff = nn.nonlocal_transfer(coarse, ref, wq, wk, wv, wo)
    row_err = float(np.abs(aff.data.sum(axis=1) - 1.0).max())
    neg = float(aff.data.min())
    refined, _ = nn.nonlocal_transfer(coarse, ref, wq, wk, wv, Tensor(np.zeros((c, d))))
    ident_err = float(np.abs(refined.data - coarse.data).max())

    # closed-form two-position oracle, exp written out by hand
    co = np.array([[0.3, -0.7]])
    rf = np.array([[1.1, 0.4]])
    q = 2.0 * co
    k = -1.0 * rf
    v = 0.5 * rf
    logits = q.T @ k / math.sqrt(1.0)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    att = e / e.sum(axis=1, keepdims=True)
    expect = co + 1.5 * (att @ v.T).T
    got, _ = nn.nonlocal_transfer(
        Tensor(co.reshape(1, 1, 2)), Tensor(rf.reshape(1, 1, 2)), Tensor([[2.0]]),
        Tensor([[-1.0]]), Tensor([[0.5]]), Tensor([[1.5]]))
    oracle_err = float(np.abs(got.data.reshape(1, 2) - expect).max())

    ok = row_err < 1e-9 and neg >= 0.0 and ident_err == 0.0 and oracle_err < 1e-10
    return ok, (f"rows {row_err:.1e}, zero-out identity {ident_err:.1e}, "
                f"2x2 oracle {oracle_err:.1e}")


def _brute_miou(gt: np.ndarray, pred: np.ndarray, c: int) -> float:
    vals = []
    for k in range(c):
        inter = np.sum((gt == k) & (pred == k))
        union = np.sum((gt == k) | (pred == k))
        if union > 0:
            vals.append(inter / union)
    return float(np.mean(vals)) if vals else float("nan")


def check_miou(pairs: int = 30) -> tuple[bool, str]:
    rng = np.random.default_rng((95, 0))
    worst = 0.0
    for _ in range(pairs):
        c = int(rng.choice([2, 3, 5]))
        gt = rng.integers(0, c, size=(7, 9))
        pred = rng.integers(0, c, size=(7, 9))
        conf = new_confusion(c)
        accumulate(conf, gt, pred)
        mean, _ = miou(conf)
        worst = max(worst, abs(mean - _brute_miou(gt, pred, c)))
    return worst < 1e-15, f"{pairs} pairs vs brute force, worst |diff| {worst:.3e}"


def check_poly_lr() -> tuple[bool, str]:
    start = poly_lr(0.01, 0, 100, 0.9)
    end = poly_lr(0.01, 100, 100, 0.9)
    mid = poly_lr(0.01, 50, 100, 0.9)
    expect_mid = 0.01 * 0.5**0.9
    ok = start == 0.01 and end == 0.0 and abs(mid - expect_mid) < 1e-15
    return ok, f"start {start}, end {end}, |mid err| {abs(mid - expect_mid):.1e}"


def check_checkpoint_roundtrip() -> tuple[bool, str]:
    rng = np.random.default_rng((96, 0))
    arrays = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4),
              "s": np.array(2.5)}
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "t.gmnt")
        save(p, arrays)
        back = load(p)
        save(p + "2", back)
        with open(p, "rb") as f1, open(p + "2", "rb") as f2:
            identical = f1.read() == f2.read()
    exact = all(np.array_equal(arrays[k], back[k]) for k in arrays)
    return exact and identical, f"exact values {exact}, re-save identical {identical}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("op_gradients", check_op_gradients),
    ("conv_gradient", check_conv_gradient),
    ("model_gradient", check_model_gradient),
    ("decouple_inverse", check_decouple_inverse),
    ("attention", check_attention),
    ("miou_oracle", check_miou),
    ("poly_lr", check_poly_lr),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
]


def run_all(out=None) -> bool:
    if out is None:
        import sys

        out = sys.stdout
    all_ok = True
    t0 = time.perf_counter()
    for name, fn in CHECKS:
        ok, detail = fn()
        all_ok = all_ok and ok
        out.write(f"{'PASS' if ok else 'FAIL'} {name}: {detail}\n")
    out.write(f"{'PASS' if all_ok else 'FAIL'} overall "
              f"({time.perf_counter() - t0:.1f}s)\n")
    return all_ok


def run_all_to_string() -> tuple[bool, str]:
    buf = io.StringIO()
    ok = run_all(buf)
    return ok, buf.getvalue()
