"""The phase-hiding inference protocol.

A client computes its real feature a = g(I), picks a fooling counterpart b
(the feature of a different sample), draws a secret phase theta, and releases
only x = exp(i*theta) (a + b i). The server runs the phase-equivariant stack
and returns h; the client recovers the prediction as d(Re[exp(-i*theta) h]).
Anyone decrypting with a wrong angle theta' gets the plausible-but-wrong
feature a' = a cos(dt) - b sin(dt), dt = theta - theta'.

The secret (theta, fooling index) lives only in `SecretRecord` on the client
side of the API; checkpoints and attack-visible records never carry it, and
the serialization tests enforce that at the byte level.

This is a simulation of the split: randomness is deterministic and seeded,
not cryptographic, and no actual transport is involved. The wire between g
and the server is an encrypted feature in the CVT1 tensor format (both
planes stacked on a leading axis of extent 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import ComplexVar, Var
from .layers import EVAL, Context
from .networks import NetworkDivision
from .rng import Rng

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SecretRecord:
    """Client-side secret for one inference; never serialized server-side."""

    theta: float
    fooling_index: int


def sample_phase(rng: Rng) -> float:
    return float(rng.uniform(0.0, TWO_PI))


def pick_fooling(batch: np.ndarray, i: int, g, rng: Rng):
    """Choose a fooling partner I' != I uniformly from the batch and return
    (b, index) with b = g(I')."""
    n = batch.shape[0]
    if n < 2:
        raise ValueError("fooling partner needs a batch of at least 2 samples")
    j = int(rng.integers(0, n - 1))
    if j >= i:
        j += 1
    b = g(batch[j:j + 1])
    return b, j


def fooling_permutation(n: int, rng: Rng) -> np.ndarray:
    """In-batch derangement: a permutation with no fixed point, so every
    sample's imaginary plane is another sample's feature."""
    if n < 2:
        raise ValueError("derangement needs n >= 2")
    perm = rng.permutation(n)
    fixed = np.nonzero(perm == np.arange(n))[0]
    for idx in fixed:  # swap each fixed point with its cyclic neighbour
        other = (idx + 1) % n
        perm[idx], perm[other] = perm[other], perm[idx]
    return perm


def _rotate_parts(re, im, theta):
    c = np.cos(theta)
    s = np.sin(theta)
    return re * c - im * s, im * c + re * s


def encrypt(a, b, theta):
    """x = exp(i*theta) (a + b i). Accepts numpy planes or graph Vars;
    `theta` may be scalar or per-item (N,1,1,1)."""
    a_shape = a.data.shape if isinstance(a, Var) else np.asarray(a).shape
    b_shape = b.data.shape if isinstance(b, Var) else np.asarray(b).shape
    if a_shape != b_shape:
        raise ValueError(f"feature/fooling shape mismatch: {a_shape} vs {b_shape}")
    re, im = _rotate_parts(a, b, theta)
    if isinstance(re, Var):
        return ComplexVar(re, im)
    return T.ComplexTensor(re, im)


def fake_decrypt(x, theta_prime):
    """a' = Re[x exp(-i*theta')]: what a wrong key reveals."""
    if isinstance(x, ComplexVar):
        return x.rotate(-np.asarray(theta_prime, dtype=x.re.data.dtype)).re
    return T.real_part(T.rotate(x, -theta_prime))


def decrypt(h, theta, division: NetworkDivision, ctx: Context = EVAL,
            logits: bool = True):
    """Client-side decryption: d(Re[exp(-i*theta) h])."""
    real = fake_decrypt(h, theta)  # honest theta makes this the true plane
    if not isinstance(real, Var):
        real = Var(real)
    return division.forward_d(real, ctx, logits=logits)


def noisy_feature(a, gamma: float, rng: Rng):
    """Perturbation baseline: a + gamma * eps, with Gaussian eps rescaled so
    its mean activation magnitude matches a's."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    data = a.data if isinstance(a, Var) else np.asarray(a)
    eps = rng.gaussian(data.shape, dtype=data.dtype)
    mean_abs = np.abs(eps).mean()
    target = np.abs(data).mean()
    if mean_abs > 0:
        eps = eps * (target / mean_abs)
    return a + gamma * eps


def secure_forward(division: NetworkDivision, images, thetas, perm,
                   ctx: Context = EVAL, logits: bool = True):
    """Full protocol pass for a batch: returns (output, a, x).

    `thetas` is an (N,) array of per-item secret phases, `perm` the fooling
    derangement. `a` and `x` come back for loss construction and auditing.
    """
    from . import autodiff as ad
    x_in = images if isinstance(images, Var) else Var(np.asarray(images, dtype=division.dtype))
    a = division.forward_g(x_in, ctx)
    b = ad.take_batch(a, perm)
    th = np.asarray(thetas, dtype=division.dtype).reshape(-1, 1, 1, 1)
    x = encrypt(a, b, th)
    h = division.forward_phi(x, ctx)
    out = decrypt(h, th, division, ctx, logits=logits)
    return out, a, x


def secure_predict(division: NetworkDivision, images, rng: Rng,
                   fooling_pool: np.ndarray | None = None):
    """Inference-time protocol: fresh secret per item, fooling partners drawn
    from `fooling_pool` (defaults to the batch itself). Returns (probs,
    secrets); the secrets stay with the caller."""
    images = np.asarray(images, dtype=division.dtype)
    n = images.shape[0]
    thetas = rng.uniform(0.0, TWO_PI, (n,))
    if fooling_pool is None:
        perm = fooling_permutation(n, rng)
        out, _, _ = secure_forward(division, images, thetas, perm, EVAL, logits=False)
        secrets = [SecretRecord(float(thetas[i]), int(perm[i])) for i in range(n)]
        return out.data, secrets
    # partners from an external pool: encrypt one by one against pool features
    idx = rng.integers(0, fooling_pool.shape[0], (n,))
    a = division.forward_g(Var(images), EVAL)
    b = division.forward_g(Var(fooling_pool[idx].astype(division.dtype)), EVAL)
    th = thetas.astype(division.dtype).reshape(-1, 1, 1, 1)
    x = encrypt(a, b, th)
    h = division.forward_phi(x, EVAL)
    out = decrypt(h, th, division, EVAL, logits=False)
    secrets = [SecretRecord(float(thetas[i]), int(idx[i])) for i in range(n)]
    return out.data, secrets


# ---------------------------------------------------------------------------
# wire format: the only thing a simulated server receives
# ---------------------------------------------------------------------------

def wire_encode(x: T.ComplexTensor) -> bytes:
    return T.cvt1_bytes(np.stack([x.re, x.im]))


def wire_decode(buf: bytes) -> T.ComplexTensor:
    planes = T.cvt1_from_bytes(buf)
    if planes.shape[0] != 2:
        raise ValueError("encrypted-feature payload must stack exactly 2 planes")
    return T.ComplexTensor(planes[0].copy(), planes[1].copy())
