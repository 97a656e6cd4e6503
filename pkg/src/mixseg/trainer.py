"""Training loop: schedules, SGD with momentum, and the mixed-pair step.

Every random decision is keyed by (seed, stream, iteration[, slot]) rather
than drawn from one shared generator, so a step's randomness does not
depend on how many draws earlier steps made. That, plus float64 tensors
and single-threaded BLAS, is what makes reruns byte-identical.

Per iteration the step computes
    total = mean CE(labeled) + mean lam*CE(mixed)
          + w_i(it) * mean (1-lam)*MSE(mixed, lam*onehot + (1-lam)*raw)
          + w(it) * mean unsup(pseudo) + 0.1 * BCE(presence)
where the mixed terms come from blending each unlabeled image with a
matched labeled partner. The mixed prediction serves three roles:
weighted by its labeled fraction lam, it is supervised against the
partner's mask; it is pulled toward the blend of that mask with the
frozen raw-pass prediction (interpolation consistency, which also
trains the attention projections since they only run on mixed inputs);
and detached plus mirror-ensembled, it is decoupled into a
stop-gradient pseudo mask for the plain unlabeled forward pass.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, errors, evaluation, mixing, nn
from . import tensor as T
from .dataio import Sample
from .tensor import Tensor

CLS_WEIGHT = 0.1


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_iter: int = 1500
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    unsup_weight_max: float = 1.0
    ramp_len: int = 0            # 0 means max(1, max_iter // 10)
    lambda_max: float = 0.5
    pairing: str = "similar"
    decouple_mode: str = "soft"
    use_nonlocal: bool = True
    mixed_ce: bool = True
    interp_weight_max: float = 1.0
    crop: int = 0                # 0 disables random cropping
    flip_prob: float = 0.5
    eval_every: int = 250
    seed: int = 0

    def resolved_ramp_len(self) -> int:
        return self.ramp_len if self.ramp_len > 0 else max(1, self.max_iter // 10)


@dataclass
class StepMetrics:
    iteration: int
    lr: float
    loss_sup: float
    loss_unsup: float
    loss_cls: float
    weight_unsup: float
    loss_total: float


@dataclass
class TrainResult:
    final_miou: float
    checkpoint_path: str
    metrics_path: str
    metrics: list = field(default_factory=list)


# --------------------------------------------------------------- schedules

def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - it/max_iter)^power; decays to exactly 0 at max_iter."""
    if max_iter < 1:
        raise errors.InvalidIteration(f"max_iter must be >= 1, got {max_iter}")
    if not 0 <= it <= max_iter:
        raise errors.InvalidIteration(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


def ramp_weight(it: int, ramp_len: int, w_max: float) -> float:
    """Sigmoid-shaped warmup: w_max * exp(-5 * (1 - min(it/ramp_len, 1))^2).

    Starts at w_max * e^-5, reaches w_max exactly at it >= ramp_len.
    """
    if ramp_len < 1:
        raise errors.InvalidIteration(f"ramp_len must be >= 1, got {ramp_len}")
    if it < 0:
        raise errors.InvalidIteration(f"iteration must be >= 0, got {it}")
    frac = min(it / ramp_len, 1.0)
    return w_max * float(np.exp(-5.0 * (1.0 - frac) ** 2))


# --------------------------------------------------------------- optimizer

class SGDState:
    """Momentum velocities, one buffer per parameter name."""

    def __init__(self, velocities: dict[str, np.ndarray]):
        self.velocities = velocities

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "SGDState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()})


def sgd_step(params: dict[str, Tensor], state: SGDState, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v.

    Parameters whose grad is None are skipped entirely (they were not in
    the graph this step, so neither decay nor momentum should move them).
    """
    if set(params) != set(state.velocities):
        raise errors.StateMismatch(
            f"optimizer state keys {sorted(state.velocities)} != params {sorted(params)}"
        )
    for name, t in params.items():
        if t.grad is None:
            continue
        g = t.grad + weight_decay * t.data
        v = state.velocities[name]
        v *= momentum
        v += g
        t.data = t.data - lr * v


# ------------------------------------------------------------ augmentation

def augment(image: np.ndarray, mask: np.ndarray | None, rng: np.random.Generator,
            crop: int = 0, flip_prob: float = 0.5):
    """Random square crop (optional) then horizontal flip with flip_prob.

    Image and mask get the same geometry. crop=0 keeps the full frame;
    otherwise crop must be a multiple of 4 (the network downsamples 4x).
    """
    _, h, w = image.shape
    if crop:
        if crop % 4 or crop < 8:
            raise errors.InvalidShape(f"crop must be >= 8 and divisible by 4, got {crop}")
        if crop > min(h, w):
            raise errors.InvalidShape(f"crop {crop} exceeds image {h}x{w}")
        y0 = int(rng.integers(0, h - crop + 1))
        x0 = int(rng.integers(0, w - crop + 1))
        image = image[:, y0:y0 + crop, x0:x0 + crop]
        if mask is not None:
            mask = mask[y0:y0 + crop, x0:x0 + crop]
    if rng.random() < flip_prob:
        image = image[:, :, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
    return np.ascontiguousarray(image), None if mask is None else np.ascontiguousarray(mask)


def presence_targets(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Binary vector: does class c (1..C-1) appear in this mask."""
    return np.array([(mask == c).any() for c in range(1, num_classes)], dtype=np.float64)


# -------------------------------------------------------------- train step

def train_step(model: nn.SegModel, labeled_batch: list[Sample],
               unlabeled_batch: list[Sample], it: int, cfg: TrainConfig,
               state: SGDState) -> StepMetrics:
    """One optimization step; deterministic given its arguments."""
    if not labeled_batch:
        raise errors.EmptyPool("need at least one labeled sample per step")
    T.zero_grads(model.params.values())

    # a diverging run overflows long before the finiteness check below
    # fires; suppress numpy's warnings so divergence surfaces as exactly
    # one DivergedError instead of a warning storm
    with np.errstate(over="ignore", invalid="ignore"):
        sup_terms = []
        cls_terms = []
        labeled_feats: list[np.ndarray] = []
        for s in labeled_batch:
            probs, deep = nn.forward_segnet(model, Tensor(s.image))
            sup_terms.append(nn.nll_from_probs(probs, s.mask.astype(np.int64)))
            logits, _ = nn.forward_classifier(model, Tensor(s.image))
            cls_terms.append(nn.bce_with_logits(
                logits, presence_targets(s.mask, model.num_classes)))
            labeled_feats.append(deep.data.copy())
        loss_sup = T.scale(_accumulate_terms(sup_terms), 1.0 / len(sup_terms))
        loss_cls = T.scale(_accumulate_terms(cls_terms), 1.0 / len(cls_terms))

        w = 0.0
        if cfg.unsup_weight_max > 0 and unlabeled_batch:
            w = ramp_weight(it, cfg.resolved_ramp_len(), cfg.unsup_weight_max)
        loss_unsup = Tensor(0.0)
        if w > 0.0:
            lvecs = np.stack([nn.presence_descriptor(model, s.image) for s in labeled_batch])
            uvecs = np.stack([nn.presence_descriptor(model, s.image) for s in unlabeled_batch])
            partners = mixing.match_pairs(
                lvecs, uvecs, cfg.pairing, np.random.default_rng((cfg.seed, 2, it)))
            unsup_terms = []
            mix_terms = []
            interp_terms = []
            for j, u in enumerate(unlabeled_batch):
                part = labeled_batch[partners[j]]
                pair_rng = np.random.default_rng((cfg.seed, 3, it, j))
                lam = mixing.sample_lambda(pair_rng, cfg.lambda_max)
                mirror = pair_rng.random() < 0.5
                lmask = part.mask.astype(np.int64)

                # student pass on the raw unlabeled image, mirrored half
                # the time; without the mirror the student can satisfy
                # the consistency term by simply reproducing its own
                # prediction, and the term stops carrying information
                view = u.image[:, :, ::-1] if mirror else u.image
                probs_u, _ = nn.forward_segnet(model, Tensor(view.copy()))
                belief = probs_u.data[:, :, ::-1] if mirror else probs_u.data

                x_m = mixing.mix_inputs(Tensor(part.image), Tensor(u.image), lam)
                ref = Tensor(labeled_feats[partners[j]]) if cfg.use_nonlocal else None
                probs_m, _ = nn.forward_segnet(model, x_m, reference_features=ref)
                if cfg.mixed_ce:
                    # the mixed image contains the labeled content at
                    # strength lam, so its prediction owes the partner's
                    # mask a lam-weighted CE (the usual mixup loss with
                    # only the labeled half of the target available)
                    mix_terms.append(T.scale(nn.nll_from_probs(probs_m, lmask), lam))
                onehot = (lmask[None] == np.arange(model.num_classes)[:, None, None])
                if cfg.interp_weight_max > 0:
                    # decoupling inverts the mixing equation on the
                    # prediction, which only recovers anything if the
                    # network actually responds to a blend like a blend;
                    # this term trains exactly that, standing in the
                    # (frozen) raw-pass belief for the missing unlabeled
                    # mask, and is what makes the pseudo masks usable
                    composed = lam * onehot + (1.0 - lam) * belief
                    interp_terms.append(
                        mixing.unsup_loss(probs_m, composed, "soft", 1.0 - lam))
                # average the mixed prediction with its mirrored twin
                # before decoupling: the targets come from an ensemble
                # the student itself never computes, which keeps them a
                # step better calibrated than the student's own output
                with T.no_grad():
                    x_mf = Tensor(np.ascontiguousarray(x_m.data[:, :, ::-1]))
                    reff = None
                    if ref is not None:
                        reff = Tensor(np.ascontiguousarray(ref.data[:, :, ::-1]))
                    probs_mf, _ = nn.forward_segnet(model, x_mf, reference_features=reff)
                teacher = 0.5 * (probs_m.data + probs_mf.data[:, :, ::-1])
                if cfg.decouple_mode == "soft":
                    target = mixing.decouple_soft(teacher, lmask, lam)
                else:
                    target = mixing.decouple_hard(teacher, lmask)
                if mirror:
                    target = target[..., ::-1]
                unsup_terms.append(
                    mixing.unsup_loss(probs_u, np.ascontiguousarray(target),
                                      cfg.decouple_mode, 1.0))
            loss_unsup = T.scale(_accumulate_terms(unsup_terms), w / len(unsup_terms))
            if interp_terms:
                w_i = ramp_weight(it, cfg.resolved_ramp_len(), cfg.interp_weight_max)
                loss_unsup = T.add(loss_unsup, T.scale(
                    _accumulate_terms(interp_terms), w_i / len(interp_terms)))
            if mix_terms:
                # supervised in nature (real masks), so it reports under
                # loss_sup and is not scaled by the consistency ramp
                loss_sup = T.add(
                    loss_sup, T.scale(_accumulate_terms(mix_terms), 1.0 / len(mix_terms)))

        total = T.add(loss_sup, T.scale(loss_cls, CLS_WEIGHT))
        if loss_unsup.requires_grad or loss_unsup.item() != 0.0:
            total = T.add(total, loss_unsup)
        if not np.isfinite(total.item()):
            raise errors.DivergedError(f"non-finite loss at iteration {it}")

        T.backward(total)
        lr = poly_lr(cfg.base_lr, it, cfg.max_iter, cfg.power)
        sgd_step(model.params, state, lr, cfg.momentum, cfg.weight_decay)
    return StepMetrics(
        iteration=it,
        lr=lr,
        loss_sup=loss_sup.item(),
        loss_unsup=loss_unsup.item(),
        loss_cls=loss_cls.item() * CLS_WEIGHT,
        weight_unsup=w,
        loss_total=total.item(),
    )


def _accumulate_terms(terms):
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


# --------------------------------------------------------------- run loop

CSV_HEADER = "iter,lr,loss_sup,loss_unsup,loss_cls,weight_unsup,val_miou"


def _fmt(x: float) -> str:
    return repr(float(x))


def run_training(model: nn.SegModel, labeled: list[Sample], unlabeled: list[Sample],
                 val: list[Sample], cfg: TrainConfig, run_dir,
                 progress=None) -> TrainResult:
    """Full run: iterate train_step, log CSV rows, save the final checkpoint.

    Batches are drawn per iteration from streams keyed (seed, stream, it),
    then augmented. Validation mIoU (flip-averaged) is computed every
    eval_every iterations and always at the last one; other rows leave the
    column empty. The checkpoint stores parameters plus optimizer
    velocities under an "opt." prefix.
    """
    os.makedirs(run_dir, exist_ok=True)
    if not labeled:
        raise errors.EmptyPool("training needs labeled samples")
    state = SGDState.zeros(model.params)
    lines = [CSV_HEADER]
    metrics_all = []
    final_miou = float("nan")
    for it in range(cfg.max_iter):
        bl = _draw_batch(labeled, cfg.batch_labeled, (cfg.seed, 0, it), cfg)
        bu = _draw_batch(unlabeled, cfg.batch_unlabeled, (cfg.seed, 1, it), cfg) \
            if unlabeled and cfg.unsup_weight_max > 0 else []
        m = train_step(model, bl, bu, it, cfg, state)
        metrics_all.append(m)
        is_last = it == cfg.max_iter - 1
        val_cell = ""
        if val and (is_last or (cfg.eval_every > 0 and (it + 1) % cfg.eval_every == 0)):
            final_miou, _ = evaluation.evaluate_miou(model, val)
            val_cell = _fmt(final_miou)
        lines.append(",".join([
            str(m.iteration), _fmt(m.lr), _fmt(m.loss_sup), _fmt(m.loss_unsup),
            _fmt(m.loss_cls), _fmt(m.weight_unsup), val_cell,
        ]))
        if progress is not None:
            progress(m, val_cell)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    with open(metrics_path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    ckpt_path = os.path.join(run_dir, "final.gmnt")
    blob = dict(model.state_arrays())
    for k, v in state.velocities.items():
        blob[f"opt.{k}"] = v
    checkpoint.save(ckpt_path, blob)
    return TrainResult(final_miou, ckpt_path, metrics_path, metrics_all)


def _draw_batch(pool: list[Sample], size: int, key, cfg: TrainConfig) -> list[Sample]:
    if not pool or size < 1:
        return []
    rng = np.random.default_rng(key)
    idxs = rng.choice(len(pool), size=size, replace=len(pool) < size)
    out = []
    for slot, i in enumerate(idxs):
        s = pool[int(i)]
        arng = np.random.default_rng((*key, 7, slot))
        img, msk = augment(s.image, s.mask, arng, cfg.crop, cfg.flip_prob)
        out.append(Sample(s.index, img, msk))
    return out


def load_model_checkpoint(model: nn.SegModel, path) -> SGDState:
    """Restore parameters (and velocities when present) from a checkpoint."""
    blob = checkpoint.load(path)
    params = {k: v for k, v in blob.items() if not k.startswith("opt.")}
    model.load_state(params)
    vel = {k[4:]: v for k, v in blob.items() if k.startswith("opt.")}
    if vel:
        if set(vel) != set(model.params):
            raise errors.StateMismatch("optimizer velocities do not match parameters")
        return SGDState({k: np.asarray(v) for k, v in vel.items()})
    return SGDState.zeros(model.params)
