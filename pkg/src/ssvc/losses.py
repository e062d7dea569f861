"""Training objectives for the contrastive-discriminator StarGAN.

Adversarial term (both networks), SimSiam on augmented real samples and a
supervised contrastive term on generated samples (discriminator only).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .augment import FREQ_MASK, TIME_MASK, MaskSpec, mask_array
from .tensor import Tensor, as_tensor, clip, concat, l2_normalize, log, logsumexp, no_grad, stop_gradient

PROB_CLAMP = 1e-7
DEFAULT_TAU = 0.5


class ZeroVectorError(ValueError):
    """Cosine similarity requested for a zero vector."""


class EmptyPositivesError(ValueError):
    """Supervised contrastive anchor without any positive candidate."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 0.01

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def neg_cosine(p, z) -> Tensor:
    """``-(p/|p|) . (z/|z|)`` along the last axis."""
    p, z = as_tensor(p), as_tensor(z)
    if p.shape[-1] != z.shape[-1]:
        raise ValueError(f"length mismatch: {p.shape[-1]} vs {z.shape[-1]}")
    for name, v in (("p", p), ("z", z)):
        if np.any(np.sqrt((v.data * v.data).sum(axis=-1)) == 0):
            raise ZeroVectorError(f"{name} contains a zero vector; cosine is undefined")
    return -(l2_normalize(p, -1) * l2_normalize(z, -1)).sum(axis=-1)


def simsiam_from_views(p1: Tensor, p2: Tensor, z1: Tensor, z2: Tensor) -> Tensor:
    """Batch mean of ``0.5 D(p1, sg(z2)) + 0.5 D(p2, sg(z1))``."""
    per = 0.5 * neg_cosine(p1, stop_gradient(z2)) + 0.5 * neg_cosine(p2, stop_gradient(z1))
    return per.mean() if per.ndim else per


def simsiam_loss(x1, x2, encoder, head) -> Tensor:
    """SimSiam objective on two views of the same utterances.

    ``encoder`` maps a batch (B, n_mcep, n_frames) to ``z`` (B, d_e) and
    ``head`` maps ``z`` to ``p``.  Single feature maps are treated as a batch
    of one.
    """
    x1, x2 = np.asarray(getattr(x1, "data", x1)), np.asarray(getattr(x2, "data", x2))
    if x1.shape != x2.shape:
        raise ValueError(f"views differ in shape: {x1.shape} vs {x2.shape}")
    if x1.ndim == 2:
        x1, x2 = x1[None], x2[None]
    b = len(x1)
    z = encoder(np.concatenate([x1, x2]))
    p = head(z)
    return simsiam_from_views(p[:b], p[b:], z[:b], z[b:])


def _similarity(anchor: Tensor, others: Tensor, tau: float, normalize: bool) -> Tensor:
    if normalize:
        anchor, others = l2_normalize(anchor, -1), l2_normalize(others, -1)
    return (others * anchor).sum(axis=-1) * (1.0 / tau)


def supcon_loss(anchor, candidates, positives, tau: float = DEFAULT_TAU, normalize: bool = True) -> Tensor:
    """Supervised contrastive loss for one anchor.

    ``candidates`` is (M, d); ``positives`` indexes the rows of ``candidates``
    that count as positives (integer indices or a boolean mask).  Similarity is
    the cosine divided by ``tau`` (raw inner product over ``tau`` when
    ``normalize`` is false).
    """
    anchor, candidates = as_tensor(anchor), as_tensor(candidates)
    if candidates.ndim != 2 or anchor.shape != candidates.shape[1:]:
        raise ValueError(f"anchor {anchor.shape} incompatible with candidates {candidates.shape}")
    pos = np.asarray(positives)
    if pos.dtype == bool:
        pos = np.flatnonzero(pos)
    pos = pos.astype(np.int64).reshape(-1)
    if pos.size == 0:
        raise EmptyPositivesError("supervised contrastive loss needs at least one positive")
    if pos.min() < 0 or pos.max() >= candidates.shape[0]:
        raise ValueError("positive index outside the candidate set")
    s = _similarity(anchor, candidates, tau, normalize)
    return logsumexp(s, axis=0) - s[pos].mean()


def fake_contrastive_loss(p1, p2, pf, tau: float = DEFAULT_TAU) -> Tensor:
    """Mean supervised contrastive loss over generated-sample anchors.

    Anchor ``pf[i]`` is contrasted against ``[pf without i ; p1 ; p2]``; its
    positives are the other generated samples.  With a single generated sample
    there is no positive and the term is defined as 0.
    """
    p1, p2, pf = as_tensor(p1), as_tensor(p2), as_tensor(pf)
    dims = {p1.shape[-1], p2.shape[-1], pf.shape[-1]}
    if len(dims) != 1:
        raise ValueError(f"projected vectors have inconsistent lengths: {sorted(dims)}")
    b = pf.shape[0]
    if b == 1:
        warnings.warn("fake contrastive loss with a single generated sample is defined as 0", RuntimeWarning)
        return Tensor(np.zeros((), dtype=pf.dtype))
    nf = l2_normalize(pf, -1)
    reals = l2_normalize(concat([p1, p2], axis=0), -1)
    s_ff = (nf @ nf.transpose()) * (1.0 / tau)  # (B, B)
    s_fr = (nf @ reals.transpose()) * (1.0 / tau)  # (B, 2B')
    rows = np.repeat(np.arange(b), b - 1)
    cols = np.array([j for i in range(b) for j in range(b) if j != i])
    off = s_ff[(rows, cols)].reshape(b, b - 1)
    lse = logsumexp(concat([off, s_fr], axis=1), axis=1)
    return (lse - off.mean(axis=1)).mean()


def _log_prob(prob: Tensor) -> Tensor:
    return log(clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP))


def adversarial_value(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Batch mean of ``log D_real + log(1 - D_fake)`` with probability clamping."""
    return (_log_prob(d_real) + _log_prob(1.0 - d_fake)).mean()


def _st_adv(x_real, fake: Tensor, source, target, D, frozen: bool):
    """Adversarial value plus the generated samples' encoder features.

    Reals are judged under (source=c', target=c) and fakes under
    (source=c, target=c'); both go through the encoder in one batch.
    """
    b = fake.shape[0]
    real = D._as_batch(x_real)
    fake4 = fake.reshape(b, 1, *fake.shape[1:])
    z = D.encode(concat([real, fake4], axis=0), frozen=frozen)
    z_real, z_fake = z[:b], z[b:]
    d_real = D.classify(z_real, target, source, frozen=frozen)
    d_fake = D.classify(z_fake, source, target, frozen=frozen)
    return adversarial_value(d_real, d_fake), z_fake


def st_adv_loss(x, source, target, G, D, detach_fake: bool = False, freeze_d: bool = False) -> Tensor:
    """Source-and-target adversarial loss on a batch of real utterances.

    ``x`` is (B, n_mcep, n_frames) with true codes ``source`` and sampled
    targets ``target``.  ``detach_fake`` blocks gradients into ``G``;
    ``freeze_d`` treats ``D``'s parameters as constants.
    """
    x = np.asarray(getattr(x, "data", x))
    if len(x) == 0:
        raise ValueError("adversarial loss needs a nonempty batch")
    if detach_fake:
        with no_grad():
            fake = G(x, source, target)
    else:
        fake = G(x, source, target)
    value, _ = _st_adv(x, fake, source, target, D, freeze_d)
    return value


def generator_loss(x, source, target, G, D) -> Tensor:
    """Adversarial loss minimised by the generator; ``D`` is held constant."""
    return st_adv_loss(x, source, target, G, D, freeze_d=True)


@dataclass
class DiscriminatorLoss:
    total: Tensor
    adv: Tensor
    sim: Tensor
    con: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("total", "adv", "sim", "con")}


def discriminator_loss(
    x,
    source,
    target,
    G,
    D,
    weights: LossWeights = LossWeights(),
    t1: MaskSpec = TIME_MASK,
    t2: MaskSpec = FREQ_MASK,
    rng: np.random.Generator | None = None,
    tau: float = DEFAULT_TAU,
    fake: Tensor | None = None,
) -> DiscriminatorLoss:
    """``-adv + lambda1 * L_sim + lambda2 * L_con`` for the discriminator.

    Generated samples never carry gradient back into ``G``.  The SimSiam and
    contrastive terms are always evaluated (for logging) but enter the total
    only when their weight is nonzero, so zero weights reproduce ``-adv``
    bit for bit.
    """
    x = np.asarray(getattr(x, "data", x))
    rng = rng if rng is not None else np.random.default_rng()
    if fake is None:
        with no_grad():
            fake = G(x, source, target)
    else:
        fake = stop_gradient(fake)
    adv, z_fake = _st_adv(x, fake, source, target, D, frozen=False)

    x1 = mask_array(x, t1, rng)
    x2 = mask_array(x, t2, rng)
    b = len(x)
    z12 = D.encode(np.concatenate([x1, x2]))
    p12 = D.project(z12)
    p1, p2 = p12[:b], p12[b:]
    sim = simsiam_from_views(p1, p2, z12[:b], z12[b:])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        con = fake_contrastive_loss(p1, p2, D.project(z_fake), tau)

    total = -adv
    if weights.lambda1:
        total = total + weights.lambda1 * sim
    if weights.lambda2:
        total = total + weights.lambda2 * con
    return DiscriminatorLoss(total, adv, sim, con)
