"""Network building blocks and the segmentation model.

Everything here composes into the tensor tape: primitive spatial ops
(conv2d, pixel_shuffle, pooling) register custom backward closures,
while the pyramid pool and the non-local feature transfer are built
out of recorded primitives so their gradients come for free.

Layout convention is channels-first without a batch axis: images are
(C, H, W) and the trainer loops over the batch. Batch sizes here are
single digits and the convs dominate, so the loop costs nothing.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

from . import errors
from . import tensor as T
from .tensor import Tensor


# ------------------------------------------------------------------ conv

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D convolution, odd square kernel, zero padding (default: same).

    x: (Cin, H, W), w: (Cout, Cin, k, k), b: (Cout,). Implemented as k*k
    shifted tensordots over the padded input; backward mirrors the loop.
    """
    cin, h, wdt = x.shape
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise errors.InvalidShape(f"conv weight must be (Cout, Cin, k, k), got {w.shape}")
    cout, cin_w, k, _ = w.shape
    if cin_w != cin:
        raise errors.ShapeMismatch(f"conv: input has {cin} channels, weight expects {cin_w}")
    if k % 2 == 0:
        raise errors.InvalidShape(f"kernel size must be odd, got {k}")
    if b.shape != (cout,):
        raise errors.ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise errors.InvalidShape(f"stride must be >= 1, got {stride}")
    if pad is None:
        pad = (k - 1) // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdt + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise errors.InvalidShape(f"conv output would be {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    hi = stride * (ho - 1) + 1
    wi = stride * (wo - 1) + 1
    acc = np.zeros((cout, ho, wo))
    for i in range(k):
        for j in range(k):
            sl = xp[:, i:i + hi:stride, j:j + wi:stride]
            acc += np.tensordot(w.data[:, :, i, j], sl, axes=(1, 0))
    out = Tensor(acc + b.data[:, None, None])

    def bwd(g):
        gb = g.sum(axis=(1, 2))
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                sl = xp[:, i:i + hi:stride, j:j + wi:stride]
                gw[:, :, i, j] = np.tensordot(g, sl, axes=((1, 2), (1, 2)))
                gxp[:, i:i + hi:stride, j:j + wi:stride] += np.tensordot(
                    w.data[:, :, i, j].T, g, axes=(1, 0)
                )
        if os.environ.get("GMX_CORRUPT_CONV_GRAD"):
            # hook for the self-check command's negative control
            gw = gw * 1.01
        gx = gxp[:, pad:pad + h, pad:pad + wdt] if pad else gxp
        return gx, gw, gb

    return T.record(out, (x, w, b), bwd)


# --------------------------------------------------------------- reshuffles

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (C*r*r, H, W) -> (C, H*r, W*r).

    out[c, h*r + i, w*r + j] = in[c*r*r + i*r + j, h, w]
    """
    c2, h, w = x.shape
    if r < 1 or c2 % (r * r) != 0:
        raise errors.ShapeMismatch(f"pixel_shuffle: {c2} channels not divisible by {r}*{r}")
    c = c2 // (r * r)
    val = x.data.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)
    out = Tensor(val)

    def bwd(g):
        return (g.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c2, h, w),)

    return T.record(out, (x,), bwd)


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Mean-pool (C, H, W) onto a bins x bins grid.

    Cell (i, j) covers rows [floor(i*H/b), ceil((i+1)*H/b)) and the
    analogous columns; cells cover every pixel and may overlap when
    the size does not divide evenly.
    """
    c, h, w = x.shape
    if bins < 1 or bins > h or bins > w:
        raise errors.InvalidShape(f"cannot pool {h}x{w} into {bins} bins")
    hs = [(i * h) // bins for i in range(bins)] + [h]
    ws = [(j * w) // bins for j in range(bins)] + [w]
    he = [-((-(i + 1) * h) // bins) for i in range(bins)]
    we = [-((-(j + 1) * w) // bins) for j in range(bins)]
    val = np.empty((c, bins, bins))
    for i in range(bins):
        for j in range(bins):
            val[:, i, j] = x.data[:, hs[i]:he[i], ws[j]:we[j]].mean(axis=(1, 2))
    out = Tensor(val)

    def bwd(g):
        gx = np.zeros((c, h, w))
        for i in range(bins):
            for j in range(bins):
                n = (he[i] - hs[i]) * (we[j] - ws[j])
                gx[:, hs[i]:he[i], ws[j]:we[j]] += g[:, i, j, None, None] / n
        return (gx,)

    return T.record(out, (x,), bwd)


def upsample_nearest(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbor resize of (C, h, w) to (C, H, W) with floor index maps."""
    c, h, w = x.shape
    ho, wo = out_hw
    if ho < h or wo < w:
        raise errors.InvalidShape(f"upsample cannot shrink {h}x{w} -> {ho}x{wo}")
    iy = (np.arange(ho) * h) // ho
    ix = (np.arange(wo) * w) // wo
    out = Tensor(x.data[:, iy[:, None], ix[None, :]])

    def bwd(g):
        gx = np.zeros((c, h, w))
        # iy/ix are nondecreasing, so each source cell owns a contiguous block
        for p in range(h):
            r0, r1 = np.searchsorted(iy, p, "left"), np.searchsorted(iy, p, "right")
            for q in range(w):
                c0, c1 = np.searchsorted(ix, q, "left"), np.searchsorted(ix, q, "right")
                gx[:, p, q] = g[:, r0:r1, c0:c1].sum(axis=(1, 2))
        return (gx,)

    return T.record(out, (x,), bwd)


def pyramid_pool(x: Tensor, bins=(1, 2, 3)) -> Tensor:
    """Concatenate x with bins-level pooled-and-upsampled copies of itself.

    (C, H, W) -> (C * (1 + len(bins)), H, W); channel map is identity,
    any channel reduction is left to the conv that follows.
    """
    c, h, w = x.shape
    if min(h, w) < max(bins):
        raise errors.InvalidShape(f"{h}x{w} input too small for pyramid bins {tuple(bins)}")
    branches = [x]
    for b in bins:
        branches.append(upsample_nearest(adaptive_avg_pool(x, b), (h, w)))
    return T.concat(branches, axis=0)


# ---------------------------------------------------------------- attention

def nonlocal_transfer(coarse: Tensor, reference: Tensor,
                      wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor):
    """Refine coarse features by attending over reference features.

    Queries come from `coarse`, keys and values from `reference`
    (both (C, h, w)); wq/wk/wv are (d, C) projections, wo is (C, d).
    Each coarse position takes a softmax-weighted mixture of reference
    positions (scaled dot product), projected back and added residually.

    Returns (refined (C, h, w), affinity (h*w, h*w)); affinity rows sum
    to 1 over reference positions.
    """
    if coarse.shape != reference.shape:
        raise errors.ShapeMismatch(f"coarse {coarse.shape} vs reference {reference.shape}")
    c, h, w = coarse.shape
    d = wq.shape[0]
    for name, mat, want in (("wq", wq, (d, c)), ("wk", wk, (d, c)),
                            ("wv", wv, (d, c)), ("wo", wo, (c, d))):
        if mat.shape != want:
            raise errors.ShapeMismatch(f"{name} shape {mat.shape} != {want}")
    n = h * w
    cm = T.reshape(coarse, (c, n))
    rm = T.reshape(reference, (c, n))
    q = T.matmul(wq, cm)
    k = T.matmul(wk, rm)
    v = T.matmul(wv, rm)
    scores = T.scale(T.matmul(T.transpose(q), k), 1.0 / np.sqrt(d))
    affinity = T.softmax(scores, axis=1)
    mixed = T.matmul(affinity, T.transpose(v))        # (n, d)
    refined = T.add(cm, T.matmul(wo, T.transpose(mixed)))
    return T.reshape(refined, (c, h, w)), affinity


# ------------------------------------------------------------------ losses

def nll_from_probs(probs: Tensor, labels: np.ndarray, ignore: np.ndarray | None = None,
                   tiny: float = 1e-12) -> Tensor:
    """Cross-entropy against integer labels, taking probabilities directly.

    probs: (C, H, W) rows of a per-pixel simplex; labels: (H, W) ints;
    ignore: optional bool mask of pixels to drop. Probabilities are
    clamped at `tiny` before the log; mean over counted pixels.
    """
    c, h, w = probs.shape
    if labels.shape != (h, w):
        raise errors.ShapeMismatch(f"labels {labels.shape} vs probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise errors.DomainError(f"labels outside [0, {c})")
    valid = np.ones((h, w), dtype=bool) if ignore is None else ~ignore
    n = int(valid.sum())
    if n == 0:
        return Tensor(0.0)
    ry, cx = np.nonzero(valid)
    ls = labels[ry, cx]
    pt = probs.data[ls, ry, cx]
    clamped = np.maximum(pt, tiny)
    out = Tensor(-np.log(clamped).mean() if n == h * w else -np.log(clamped).sum() / n)

    def bwd(g):
        gp = np.zeros((c, h, w))
        gp[ls, ry, cx] = -float(g) * (pt > tiny) / (clamped * n)
        return (gp,)

    return T.record(out, (probs,), bwd)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    ex = np.exp(-np.abs(x))  # never overflows; both branches rewritten in terms of it
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits, numerically stable form."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if x.shape != t.shape:
        raise errors.ShapeMismatch(f"logits {x.shape} vs targets {t.shape}")
    val = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(val.mean())
    sig = sigmoid_np(x)

    def bwd(g):
        return (float(g) * (sig - t) / x.size,)

    return T.record(out, (logits,), bwd)


# ------------------------------------------------------------------- model

class SegModel:
    """Encoder / pyramid-pool / shuffle-decoder segmentation net.

    Encoder downsamples 4x over two strided convs and keeps the first
    stage as a skip; the decoder upsamples twice with pixel shuffles.
    A small linear head on pooled encoder features predicts which
    foreground classes an image contains (used for pair matching and
    as an auxiliary loss).
    """

    def __init__(self, num_classes: int = 4, in_channels: int = 3,
                 enc_channels=(16, 32, 64), psp_bins=(1, 2, 3),
                 embed_dim: int = 64, seed: int = 0):
        if num_classes < 2:
            raise errors.InvalidShape(f"need >= 2 classes, got {num_classes}")
        c1, c2, c3 = enc_channels
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.enc_channels = tuple(enc_channels)
        self.psp_bins = tuple(psp_bins)
        self.embed_dim = embed_dim
        self.seed = seed
        cp = c3 * (1 + len(self.psp_bins))
        layout = {
            "enc1.w": ((c1, in_channels, 3, 3), in_channels * 9),
            "enc1.b": ((c1,), None),
            "enc2.w": ((c2, c1, 3, 3), c1 * 9),
            "enc2.b": ((c2,), None),
            "enc3.w": ((c3, c2, 3, 3), c2 * 9),
            "enc3.b": ((c3,), None),
            "fuse.w": ((c3, cp, 3, 3), cp * 9),
            "fuse.b": ((c3,), None),
            "dec1.w": ((c1 * 4, c3, 3, 3), c3 * 9),
            "dec1.b": ((c1 * 4,), None),
            "dec2.w": ((c3, c1 * 2, 3, 3), c1 * 2 * 9),
            "dec2.b": ((c3,), None),
            "head.w": ((num_classes * 4, c3, 3, 3), c3 * 9),
            "head.b": ((num_classes * 4,), None),
            "attn.wq": ((embed_dim, c3), c3),
            "attn.wk": ((embed_dim, c3), c3),
            "attn.wv": ((embed_dim, c3), c3),
            "attn.wo": ((c3, embed_dim), embed_dim),
            "cls.w": ((c3, num_classes - 1), c3),
            "cls.b": ((num_classes - 1,), None),
        }
        self.params: dict[str, Tensor] = {}
        for name, (shape, fan_in) in layout.items():
            if fan_in is None:
                self.params[name] = T.zeros(shape, requires_grad=True)
            else:
                rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
                self.params[name] = T.he_normal(shape, fan_in, rng)
        # the attention residual must start near the identity: at full
        # init scale an untrained wo injects noise into every consumer
        # of the refined features
        self.params["attn.wo"].data *= 0.1

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        mine = set(self.params)
        theirs = set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise errors.StateMismatch(f"missing={missing} unexpected={extra}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise errors.StateMismatch(
                    f"{k}: checkpoint shape {arrays[k].shape} != model {t.shape}"
                )
            t.data = np.asarray(arrays[k], dtype=np.float64, order="C")
            t.grad = None


def _encode(model: SegModel, image: Tensor):
    p = model.params
    skip = T.relu(conv2d(image, p["enc1.w"], p["enc1.b"], stride=2))
    h2 = T.relu(conv2d(skip, p["enc2.w"], p["enc2.b"], stride=2))
    deep = T.relu(conv2d(h2, p["enc3.w"], p["enc3.b"], stride=1))
    return skip, deep


def forward_segnet(model: SegModel, image: Tensor, reference_features: Tensor | None = None):
    """Full forward pass: per-pixel class probabilities.

    image: (in_channels, H, W) with H, W divisible by 4. When
    reference_features (the deep features of another image) are given,
    the deep features are refined by attending over them before the
    pyramid pool; without a reference the features pass through
    untouched, so plain supervised, student and inference passes never
    involve the attention projections. Returns (probs (C, H, W), deep
    features (C3, H/4, W/4)); the returned features are pre-refinement,
    so they can serve as a reference for other passes.
    """
    cin, h, w = image.shape
    if cin != model.in_channels:
        raise errors.ShapeMismatch(f"image has {cin} channels, model expects {model.in_channels}")
    if h % 4 or w % 4:
        raise errors.InvalidShape(f"spatial dims must be divisible by 4, got {h}x{w}")
    if min(h // 4, w // 4) < max(model.psp_bins):
        raise errors.InvalidShape(f"{h}x{w} too small for pyramid bins {model.psp_bins}")
    p = model.params
    skip, deep = _encode(model, image)
    feats = deep
    if reference_features is not None:
        feats, _ = nonlocal_transfer(
            feats, reference_features,
            p["attn.wq"], p["attn.wk"], p["attn.wv"], p["attn.wo"],
        )
    pooled = pyramid_pool(feats, model.psp_bins)
    fused = T.relu(conv2d(pooled, p["fuse.w"], p["fuse.b"]))
    up1 = pixel_shuffle(conv2d(fused, p["dec1.w"], p["dec1.b"]), 2)
    cat = T.concat([up1, skip], axis=0)
    dec = T.relu(conv2d(cat, p["dec2.w"], p["dec2.b"]))
    logits = pixel_shuffle(conv2d(dec, p["head.w"], p["head.b"]), 2)
    return T.softmax(logits, axis=0), deep


def forward_classifier(model: SegModel, image: Tensor):
    """Foreground-presence logits, one per non-background class.

    Returns (logits (num_classes - 1,), pooled deep feature (C3,)).
    """
    _, deep = _encode(model, image)
    c3 = deep.shape[0]
    pooled = T.tmean(T.reshape(deep, (c3, deep.shape[1] * deep.shape[2])), axis=1)
    row = T.reshape(pooled, (1, c3))
    p = model.params
    logits = T.add(T.matmul(row, p["cls.w"]),
                   T.reshape(p["cls.b"], (1, model.num_classes - 1)))
    return T.reshape(logits, (model.num_classes - 1,)), pooled


def presence_descriptor(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Per-image descriptor for pair matching: sigmoid of the class-presence
    logits, computed without touching the tape."""
    with T.no_grad():
        logits, _ = forward_classifier(model, Tensor(image))
    return sigmoid_np(logits.data)
