"""Training losses: cross-entropy, embedding distance, generator/repairer objectives, NT-Xent."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .shifts import ShiftSpec, apply_shift

PROB_FLOOR = 1e-12


def cross_entropy(probs, labels) -> Tensor:
    """Mean of -log p[label]; probabilities are floored at 1e-12 before the log.

    ``probs`` is (C,) with a scalar label or (N, C) with N labels. With one-hot
    targets this is the KL divergence between target and prediction.
    """
    probs = nx.as_tensor(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if probs.ndim == 1:
        probs = nx.reshape(probs, (1, -1))
    picked = nx.take_rows(probs, np.arange(len(labels)), labels)
    return nx.mean(nx.mul(nx.log(nx.clip(picked, PROB_FLOOR, None)), -1.0))


def embed_distance(z1, z2) -> Tensor:
    """Squared L2 distance per row (or for a single pair of vectors)."""
    z1, z2 = nx.as_tensor(z1), nx.as_tensor(z2)
    if z1.shape != z2.shape:
        raise nx.ShapeError(f"embedding shapes differ: {z1.shape} vs {z2.shape}")
    return nx.tsum(nx.square(z1 - z2), axis=-1)


def generator_terms(phi, theta, gen, x, y, rng=None) -> tuple[Tensor, Tensor]:
    """(L_g, L_adv) for a batch with phi and theta frozen.

    L_g = -mean M(phi(G(x)), phi(x)) pushes perturbed embeddings away;
    L_adv = CE(theta(phi(G(x))), y) keeps them classifiable.
    """
    phi_f, theta_f = phi.frozen(), theta.frozen()
    z = phi_f(x).detach()
    xp = gen(x, rng)
    zp = phi_f(xp)
    l_g = nx.mul(nx.mean(embed_distance(zp, z)), -1.0)
    l_adv = cross_entropy(theta_f(zp), y)
    return l_g, l_adv


def generator_loss(phi, theta, gen, x, y, rng=None) -> Tensor:
    l_g, l_adv = generator_terms(phi, theta, gen, x, y, rng)
    return l_g + l_adv


def shift_batch(x: np.ndarray, specs, rng: np.random.Generator) -> np.ndarray:
    """Apply one ShiftSpec per image of an (N, H, W) batch."""
    if isinstance(specs, ShiftSpec) or specs is None:
        specs = [specs] * len(x)
    return np.stack([apply_shift(img, s, rng) for img, s in zip(x, specs)])


def repairer_loss(phi, rep, x, specs, rng, shifted: np.ndarray | None = None) -> Tensor:
    """mean M(phi(R(S(x))), phi(x)) with phi frozen."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    phi_f = phi.frozen()
    if shifted is None:
        shifted = shift_batch(x, specs, rng)
    z = phi_f(x).detach()
    zr = phi_f(rep(shifted))
    return nx.mean(embed_distance(zr, z))


def nt_xent(z, tau: float = 0.5) -> Tensor:
    """Normalized-temperature cross-entropy over 2N embeddings.

    Rows 2k and 2k+1 are a positive pair. Each anchor's softmax runs over the
    other 2N-1 rows; the loss is the mean over all 2N anchors. Norms are floored
    at 1e-12.
    """
    z = nx.as_tensor(z)
    n2 = z.shape[0]
    if n2 < 4 or n2 % 2:
        raise ValueError("nt_xent needs an even number (>= 4) of embeddings")
    norm = nx.sqrt(nx.tsum(nx.square(z), axis=1, keepdims=True))
    norm = nx.clip(norm, 1e-12, None)
    u = nx.div(z, norm)
    sim = nx.mul(nx.matmul(u, nx.transpose(u)), 1.0 / tau)
    # exclude self-similarity with a large negative constant on the diagonal
    sim = sim + np.diag(np.full(n2, -1e9))
    logp = nx.log_softmax(sim, axis=1)
    pos = np.arange(n2) ^ 1
    return nx.mul(nx.mean(nx.take_rows(logp, np.arange(n2), pos)), -1.0)
