"""Segmentation metrics, flip-averaged inference, pseudo-mask quality.

mIoU comes from a running C x C confusion matrix (rows = ground truth,
columns = prediction). Classes whose union is empty are undefined (nan
per-class) and excluded from the mean rather than counted as zero.
"""

from __future__ import annotations

import numpy as np

from . import errors, mixing, nn
from . import tensor as T
from .tensor import Tensor

IGNORE = mixing.IGNORE


def new_confusion(num_classes: int) -> np.ndarray:
    if num_classes < 2:
        raise errors.InvalidShape(f"need >= 2 classes, got {num_classes}")
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(conf: np.ndarray, gt: np.ndarray, pred: np.ndarray,
               ignore_index: int = IGNORE) -> None:
    """Add one pair of label maps into the confusion matrix.

    Pixels equal to ignore_index in either map are dropped (ground truth
    uses it for unlabeled regions, pseudo masks for suppressed pixels).
    """
    c = conf.shape[0]
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    if gt.shape != pred.shape:
        raise errors.ShapeMismatch(f"gt {gt.shape} vs pred {pred.shape}")
    keep = (gt != ignore_index) & (pred != ignore_index)
    gt, pred = gt[keep], pred[keep]
    if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
        raise errors.DomainError(f"labels outside [0, {c})")
    conf += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)


def miou(conf: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean IoU and per-class IoU (nan where the class never appears)."""
    diag = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    per_class = np.full(conf.shape[0], np.nan)
    defined = union > 0
    per_class[defined] = diag[defined] / union[defined]
    mean = float(per_class[defined].mean()) if defined.any() else float("nan")
    return mean, per_class


def predict_probs(model, image: np.ndarray) -> np.ndarray:
    """Plain forward pass on a numpy image, no gradient bookkeeping."""
    with T.no_grad():
        probs, _ = nn.forward_segnet(model, Tensor(image))
    return probs.data


def predict_tta_flip(model, image: np.ndarray) -> np.ndarray:
    """Average the forward pass with its horizontal-flip counterpart."""
    p1 = predict_probs(model, image)
    p2 = predict_probs(model, image[:, :, ::-1])[:, :, ::-1]
    return 0.5 * (p1 + p2)


def evaluate_miou(model, samples, tta: bool = True) -> tuple[float, np.ndarray]:
    """mIoU of the model over Samples that carry ground-truth masks."""
    conf = new_confusion(model.num_classes)
    for s in samples:
        probs = predict_tta_flip(model, s.image) if tta else predict_probs(model, s.image)
        accumulate(conf, s.mask, probs.argmax(axis=0))
    return miou(conf)


def pseudo_mask_quality(model, labeled_samples, unlabeled_samples,
                        unlabeled_masks: dict[int, np.ndarray],
                        lambda_max: float = 0.5, pairing: str = "similar",
                        use_nonlocal: bool = True, seed: int = 0,
                        max_images: int | None = None) -> float:
    """mIoU of hard pseudo masks against held-back unlabeled ground truth.

    Runs the same pair-match / mix / decouple pipeline the trainer uses,
    at a fixed probe seed, and scores the resulting hard pseudo masks.
    The true unlabeled masks are passed in explicitly: this is an
    evaluation probe, the training path never sees them.
    """
    if not labeled_samples or not unlabeled_samples:
        raise errors.EmptyPool("probe needs both labeled and unlabeled samples")
    probe = unlabeled_samples[:max_images] if max_images else unlabeled_samples
    lvecs = np.stack([nn.presence_descriptor(model, s.image) for s in labeled_samples])
    uvecs = np.stack([nn.presence_descriptor(model, s.image) for s in probe])
    partners = mixing.match_pairs(
        lvecs, uvecs, pairing, np.random.default_rng((seed, 11)))
    conf = new_confusion(model.num_classes)
    for k, u in enumerate(probe):
        part = labeled_samples[partners[k]]
        lam = mixing.sample_lambda(np.random.default_rng((seed, 13, u.index)), lambda_max)
        with T.no_grad():
            x_m = mixing.mix_inputs(Tensor(part.image), Tensor(u.image), lam)
            ref = None
            if use_nonlocal:
                _, ref = nn.forward_segnet(model, Tensor(part.image))
            probs_m, _ = nn.forward_segnet(model, x_m, reference_features=ref)
        pseudo = mixing.decouple_hard(probs_m, part.mask.astype(np.int64))
        accumulate(conf, unlabeled_masks[u.index], pseudo)
    return miou(conf)[0]
