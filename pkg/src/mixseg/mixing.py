"""Labeled/unlabeled pair mixing and pseudo-mask decoupling.

One training pair blends a labeled image into an unlabeled one with a
coefficient lam drawn from (0, lambda_max], runs the mixed input through
the network, and then strips the labeled contribution back out of the
mixed prediction to obtain a pseudo mask for the unlabeled image. The
subtraction is exact in exact arithmetic: if

    y_m = lam * onehot(labeled mask) + (1 - lam) * y_u

then clamping y_m - lam * onehot at zero and renormalizing per pixel
recovers y_u. Decoupling applies that inverse to the actual network
output, where it is only approximate, which is the whole point: the
labeled half of the signal is known and removable, the residue is new
information about the unlabeled image.
"""

from __future__ import annotations

import numpy as np

from . import errors
from . import nn
from . import tensor as T
from .tensor import Tensor

IGNORE = 255

DIST_TOL = 1e-6      # allowed deviation of per-pixel class sums from 1
MASS_FLOOR = 1e-12   # below this post-subtraction mass, fall back to uniform


def sample_lambda(rng: np.random.Generator, lambda_max: float = 0.5) -> float:
    """Uniform draw from the half-open interval (0, lambda_max]."""
    if not 0.0 < lambda_max < 1.0:
        raise errors.InvalidLambda(f"lambda_max must be in (0, 1), got {lambda_max}")
    # rng.random() is in [0, 1), so 1 - rng.random() is in (0, 1]
    return lambda_max * (1.0 - rng.random())


def match_pairs(labeled_vecs, unlabeled_vecs, mode: str = "similar",
                rng: np.random.Generator | None = None) -> list[int]:
    """Assign each unlabeled image a labeled partner index.

    labeled_vecs / unlabeled_vecs: (n, d) arrays of per-image descriptors.
    mode "similar" greedily picks the nearest unused labeled vector by L2
    distance (ties to the lower index); mode "random" draws seeded
    permutations. Both run without replacement and refill the labeled
    pool once it empties, so partners stay spread out.
    """
    lv = np.asarray(labeled_vecs, dtype=np.float64)
    uv = np.asarray(unlabeled_vecs, dtype=np.float64)
    if lv.ndim != 2 or uv.ndim != 2:
        raise errors.InvalidShape("descriptor arrays must be 2-D")
    if len(lv) == 0 or len(uv) == 0:
        raise errors.EmptyPool(f"labeled={len(lv)} unlabeled={len(uv)}")
    if lv.shape[1] != uv.shape[1]:
        raise errors.ShapeMismatch(f"descriptor dims {lv.shape[1]} vs {uv.shape[1]}")

    partners: list[int] = []
    if mode == "similar":
        avail: list[int] = []
        for u in uv:
            if not avail:
                avail = list(range(len(lv)))
            d = np.linalg.norm(lv[avail] - u, axis=1)
            pick = int(np.argmin(d))  # first minimum, and avail is ascending
            partners.append(avail.pop(pick))
    elif mode == "random":
        if rng is None:
            raise errors.ConfigError("mode 'random' needs an rng")
        queue: list[int] = []
        for _ in uv:
            if not queue:
                queue = list(rng.permutation(len(lv)))
            partners.append(int(queue.pop(0)))
    else:
        raise errors.ConfigError(f"unknown pairing mode {mode!r}")
    return partners


def mix_inputs(x_l: Tensor, x_u: Tensor, lam: float) -> Tensor:
    """x_m = lam * x_l + (1 - lam) * x_u, elementwise."""
    if not 0.0 < lam < 1.0:
        raise errors.InvalidLambda(f"lam must be in (0, 1), got {lam}")
    if x_l.shape != x_u.shape:
        raise errors.ShapeMismatch(f"{x_l.shape} vs {x_u.shape}")
    return T.add(T.scale(x_l, lam), T.scale(x_u, 1.0 - lam))


def _as_dist_array(y_m, what: str) -> np.ndarray:
    arr = y_m.data if isinstance(y_m, Tensor) else np.asarray(y_m, dtype=np.float64)
    if arr.ndim != 3:
        raise errors.InvalidShape(f"{what} must be (C, H, W), got {arr.shape}")
    dev = np.abs(arr.sum(axis=0) - 1.0).max()
    if dev > DIST_TOL:
        raise errors.InvalidDistribution(f"{what} pixel sums deviate from 1 by {dev:.3g}")
    return arr


def _check_mask(mask: np.ndarray, c: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= c:
        raise errors.DomainError(f"mask values outside [0, {c})")
    return mask


def decouple_soft(y_m, labeled_mask: np.ndarray, lam: float) -> np.ndarray:
    """Remove the labeled contribution from a mixed prediction.

    y_m: (C, H, W) per-pixel distribution from the mixed input;
    labeled_mask: (H, W) int classes of the labeled partner. Returns a
    (C, H, W) soft pseudo mask: max(y_m - lam * onehot, 0), renormalized
    per pixel, uniform where the clamped mass is below MASS_FLOOR.
    """
    if not 0.0 < lam < 1.0:
        raise errors.InvalidLambda(f"lam must be in (0, 1), got {lam}")
    arr = _as_dist_array(y_m, "y_m")
    c, h, w = arr.shape
    mask = _check_mask(labeled_mask, c)
    if mask.shape != (h, w):
        raise errors.ShapeMismatch(f"mask {mask.shape} vs y_m spatial {(h, w)}")
    onehot = (mask[None, :, :] == np.arange(c)[:, None, None])
    q = np.maximum(arr - lam * onehot, 0.0)
    s = q.sum(axis=0)
    starved = s <= MASS_FLOOR
    safe = np.where(starved, 1.0, s)
    out = q / safe
    if starved.any():
        out[:, starved] = 1.0 / c
    return out


def decouple_hard(y_m, labeled_mask: np.ndarray) -> np.ndarray:
    """Hard pseudo mask: argmax where the labeled partner is background,
    IGNORE where it has foreground (those pixels are dominated by the
    labeled content, so no gradient should come from them)."""
    arr = _as_dist_array(y_m, "y_m")
    c, h, w = arr.shape
    mask = _check_mask(labeled_mask, c)
    if mask.shape != (h, w):
        raise errors.ShapeMismatch(f"mask {mask.shape} vs y_m spatial {(h, w)}")
    out = arr.argmax(axis=0).astype(np.int64)  # argmax ties resolve to lower class
    out[mask > 0] = IGNORE
    return out


def unsup_loss(pred_u: Tensor, target, mode: str, weight: float) -> Tensor:
    """Consistency loss between the unlabeled prediction and its pseudo mask.

    mode "soft": squared error summed over classes, averaged over pixels.
    mode "hard": cross-entropy with IGNORE pixels dropped.
    The pseudo target is a constant (no gradient flows into it); weight
    scales both the value and the gradient, so weight=0 is an exact no-op.
    """
    if weight < 0:
        raise errors.DomainError(f"weight must be >= 0, got {weight}")
    c, h, w = pred_u.shape
    if mode == "soft":
        tgt = np.asarray(target, dtype=np.float64)
        if tgt.shape != pred_u.shape:
            raise errors.ShapeMismatch(f"target {tgt.shape} vs pred {pred_u.shape}")
        diff = T.sub(pred_u, Tensor(tgt))
        return T.scale(T.tsum(T.mul(diff, diff)), weight / (h * w))
    if mode == "hard":
        tgt = np.asarray(target)
        if tgt.shape != (h, w):
            raise errors.ShapeMismatch(f"target {tgt.shape} vs spatial {(h, w)}")
        ignore = tgt == IGNORE
        labels = np.where(ignore, 0, tgt)
        return T.scale(nn.nll_from_probs(pred_u, labels, ignore), weight)
    raise errors.ConfigError(f"unknown decouple mode {mode!r}")
