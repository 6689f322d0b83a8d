"""Adversarial feature-encryption training.

Each step trains the critic D to separate real features a from wrong-key
decryptions a' (ascend D(a) - E[D(a')], then clip weights), and then updates
g, phi, d on the combined objective

    total = lambda_adv * (D(a) - E_offsets[D(a')]) + cross_entropy(y_hat, y)

with a fresh secret phase per sample per step and an in-batch derangement
supplying the fooling partners. The wrong-key offsets are k-1 nonzero
rotations resampled every epoch and shared across a batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, backward
from .data import minibatches
from .layers import Context
from .networks import Discriminator, NetworkDivision, forward_plain
from .optim import RMSProp, SGD, clip_params
from .rng import Rng
from .secure import TWO_PI, fooling_permutation, secure_forward


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AdvBatchLosses:
    d_loss: float      # critic objective (it ascends this)
    g_loss: float      # the same quantity, descended by the encryption side
    task_loss: float
    total: float


@dataclass(frozen=True)
class OffsetSchedule:
    """k-1 nonzero decryption offsets used as adversarial negatives."""

    k: int
    offsets: np.ndarray

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("anonymity count k must be >= 2")
        if len(self.offsets) != self.k - 1:
            raise ValueError("schedule must hold exactly k-1 offsets")


def sample_offsets(k: int, rng: Rng, theta_min: float = 0.1) -> OffsetSchedule:
    if k < 2:
        raise ValueError("anonymity count k must be >= 2")
    return OffsetSchedule(k, rng.uniform(theta_min, TWO_PI - theta_min, (k - 1,)))


def task_loss(logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels)
    classes = logits.data.shape[-1]
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label out of range [0, {classes})")
    return -ad.select_rows(ad.log_softmax(logits), labels).mean()


def fake_features(a, b, offsets: np.ndarray):
    """Wrong-key decryptions a' = a cos(dt) - b sin(dt), one per offset.
    Works on Vars or numpy planes."""
    return [a * float(np.cos(dt)) - b * float(np.sin(dt)) for dt in offsets]


def adv_loss(disc: Discriminator, a, fakes, ctx: Context) -> Var:
    """Batch mean of D(a) - mean_offsets D(a')."""
    if not fakes:
        raise ValueError("offset schedule is empty")
    a = a if isinstance(a, Var) else Var(np.asarray(a))
    score_real = disc(a, ctx).mean()
    fake_scores = [disc(f if isinstance(f, Var) else Var(np.asarray(f)), ctx).mean()
                   for f in fakes]
    mean_fake = fake_scores[0]
    for s in fake_scores[1:]:
        mean_fake = mean_fake + s
    return score_real - mean_fake * (1.0 / len(fake_scores))


def clip_discriminator(disc: Discriminator, c_clip: float | None = None):
    clip_params(disc.params(), disc.c_clip if c_clip is None else c_clip)


@dataclass
class Optimizers:
    pipeline: SGD
    critic: RMSProp

    @classmethod
    def create(cls, division: NetworkDivision, disc: Discriminator, lr: float = 0.05,
               momentum: float = 0.9, critic_lr: float = 5e-5) -> "Optimizers":
        return cls(SGD(division.params(), lr, momentum), RMSProp(disc.params(), critic_lr))


def _checked(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite; lower the learning rate "
                               f"or inspect the batch")
    return float(value)


def train_step(division: NetworkDivision, disc: Discriminator, batch_images,
               batch_labels, schedule: OffsetSchedule, opts: Optimizers, rng: Rng,
               lambda_adv: float = 1.0, n_critic: int = 5) -> AdvBatchLosses:
    """One combined update; batch must have >= 2 samples so fooling partners
    exist. Returns the measured losses."""
    n = batch_images.shape[0]
    if n < 2:
        raise ValueError("adversarial training needs batch size >= 2")
    train_ctx = Context(train=True, rng=rng.child(1))

    # critic phase: features detached, only D moves
    d_loss_val = 0.0
    for it in range(n_critic):
        crng = rng.child(100 + it)
        a_np = division.forward_g(Var(batch_images.astype(division.dtype)), train_ctx).data
        perm = fooling_permutation(n, crng)
        fakes = fake_features(a_np, a_np[perm], schedule.offsets)
        loss = adv_loss(disc, a_np, fakes, train_ctx)
        d_loss_val = _checked(loss.data, "critic loss")
        opts.critic.zero_grad()
        backward(-loss)  # ascend
        opts.critic.step()
        clip_discriminator(disc)

    # generator phase: g, phi, d move; D frozen
    grng = rng.child(2)
    thetas = grng.uniform(0.0, TWO_PI, (n,))
    perm = fooling_permutation(n, grng)
    logits, a, x = secure_forward(division, batch_images.astype(division.dtype),
                                  thetas, perm, train_ctx)
    ce = task_loss(logits, batch_labels)
    b = ad.take_batch(a, perm)
    g_adv = adv_loss(disc, a, fake_features(a, b, schedule.offsets), train_ctx)
    total = g_adv * lambda_adv + ce if lambda_adv else ce
    opts.pipeline.zero_grad()
    backward(total)
    opts.pipeline.step()

    return AdvBatchLosses(
        d_loss=d_loss_val,
        g_loss=_checked(g_adv.data, "adversarial loss"),
        task_loss=_checked(ce.data, "task loss"),
        total=_checked(total.data, "total loss"),
    )


def train(division: NetworkDivision, disc: Discriminator, dataset, epochs: int,
          batch_size: int, rng: Rng, k: int = 8, lambda_adv: float = 1.0,
          n_critic: int = 5, theta_min: float = 0.1, lr: float = 0.05,
          momentum: float = 0.9, critic_lr: float = 5e-5,
          log_writer=None, log_every: int = 1) -> list[AdvBatchLosses]:
    """Epoch loop over the combined objective; offsets resample per epoch."""
    opts = Optimizers.create(division, disc, lr, momentum, critic_lr)
    history = []
    step = 0
    for epoch in range(epochs):
        erng = rng.child(1000 + epoch)
        schedule = sample_offsets(k, erng.child(0), theta_min)
        for bi, (images, labels) in enumerate(minibatches(dataset, batch_size,
                                                          erng.child(1))):
            losses = train_step(division, disc, images, labels, schedule, opts,
                                erng.child(2 + bi), lambda_adv, n_critic)
            history.append(losses)
            if log_writer is not None and step % log_every == 0:
                log_writer.writerow([epoch, step, f"{losses.d_loss:.6f}",
                                     f"{losses.g_loss:.6f}", f"{losses.task_loss:.6f}",
                                     f"{losses.total:.6f}"])
            step += 1
    return history


def train_baseline(division: NetworkDivision, dataset, epochs: int, batch_size: int,
                   rng: Rng, lr: float = 0.05, momentum: float = 0.9,
                   log_writer=None) -> list[float]:
    """Plain supervised training for the real-valued comparison networks."""
    opt = SGD(division.params(), lr, momentum)
    history = []
    step = 0
    for epoch in range(epochs):
        erng = rng.child(1000 + epoch)
        ctx = Context(train=True, rng=erng.child(0))
        for bi, (images, labels) in enumerate(minibatches(dataset, batch_size,
                                                          erng.child(1))):
            logits = forward_plain(division, images, ctx, rng=erng.child(2 + bi))
            loss = task_loss(logits, labels)
            val = _checked(loss.data, "task loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            history.append(val)
            if log_writer is not None:
                log_writer.writerow([epoch, step, "", "", f"{val:.6f}", f"{val:.6f}"])
            step += 1
    return history


CSV_HEADER = ["epoch", "step", "d_loss", "g_loss", "task_loss", "total"]


def open_log(path):
    fp = open(path, "w", newline="")
    writer = csv.writer(fp)
    writer.writerow(CSV_HEADER)
    return fp, writer
