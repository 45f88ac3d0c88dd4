"""Modal-specific information bottleneck losses (KL minimality + InfoNCE alignment)."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .encoders import MODALITIES
from .errors import ConfigError

DEFAULT_BETA = {"g": 1e-3, "v": 1e-2, "a": 1e-2, "r": 1e-2}


@dataclass
class IBWeights:
    beta: dict = field(default_factory=lambda: dict(DEFAULT_BETA))
    tau: float = 0.1

    def __post_init__(self):
        if any(b < 0 for b in self.beta.values()):
            raise ConfigError(f"negative beta in {self.beta}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass
class BatchPairs:
    """Positive pairs (kg1 index, kg2 index) with optional explicit negatives.

    Without explicit negatives every other pair in the batch acts as a
    negative (in-batch negatives). ``neg2[k]`` lists kg2 replacements for
    pair k's tail, ``neg1[k]`` kg1 replacements for its head; both or neither.
    """

    positives: torch.Tensor  # (B, 2) long
    neg2: torch.Tensor | None = None  # (B, K) long
    neg1: torch.Tensor | None = None  # (B, K) long

    def __post_init__(self):
        self.positives = torch.as_tensor(self.positives, dtype=torch.long).reshape(-1, 2)
        if (self.neg1 is None) != (self.neg2 is None):
            raise ConfigError("explicit negatives need both neg1 and neg2")
        if self.neg2 is not None:
            self.neg1 = torch.as_tensor(self.neg1, dtype=torch.long).reshape(len(self.positives), -1)
            self.neg2 = torch.as_tensor(self.neg2, dtype=torch.long).reshape(len(self.positives), -1)
            if (self.neg2 == self.positives[:, 1:]).any() or (self.neg1 == self.positives[:, :1]).any():
                raise ConfigError("a negative equals its gold counterpart")

    def __len__(self):
        return len(self.positives)

    @property
    def left(self):
        return self.positives[:, 0]

    @property
    def right(self):
        return self.positives[:, 1]


def kl_minimality(g, batch=None):
    """Mean over ``batch`` rows of KL(N(mu, diag sigma^2) || N(0, I))."""
    mu, sigma = (g.mu, g.sigma) if batch is None else (g.mu[batch], g.sigma[batch])
    var = sigma * sigma
    return 0.5 * (mu * mu + var - torch.log(var) - 1.0).sum(dim=-1).mean()


def _unit(z):
    norms = z.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise FloatingPointError("zero-norm embedding row; cosine similarity undefined")
    return z / norms


def _candidate_logits(anchor, pos, neg, tau):
    # anchor (B, d), pos (B, d), neg (B, K, d) -> (B, 1 + K), positive in column 0
    pos_logit = (anchor * pos).sum(-1, keepdim=True)
    neg_logit = torch.einsum("bd,bkd->bk", anchor, neg)
    return torch.cat([pos_logit, neg_logit], dim=1) / tau


def infonce_alignment(z1, z2, batch, tau):
    """Symmetric InfoNCE over cosine similarities, averaged over both directions."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.neg2 is None:
        a = _unit(z1[batch.left])
        b = _unit(z2[batch.right])
        logits = a @ b.T / tau
        target = torch.arange(len(batch))
        return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
    a = _unit(z1[batch.left])
    b = _unit(z2[batch.right])
    target = torch.zeros(len(batch), dtype=torch.long)
    l12 = _candidate_logits(a, b, _unit(z2[batch.neg2]), tau)
    l21 = _candidate_logits(b, a, _unit(z1[batch.neg1]), tau)
    return 0.5 * (F.cross_entropy(l12, target) + F.cross_entropy(l21, target))


def modal_specific_loss(g1, g2, z1, z2, batch, beta, tau, parts=None):
    """beta * (KL_kg1 + KL_kg2) + InfoNCE(z1, z2).

    ``parts``, if a dict, receives the unweighted "kl" and "align" scalars.
    """
    kl = kl_minimality(g1, batch.left) + kl_minimality(g2, batch.right)
    align = infonce_alignment(z1, z2, batch, tau)
    if parts is not None:
        parts["kl"], parts["align"] = kl, align
    return beta * kl + align


def total_specific_loss(embeddings, batch, w, modalities=MODALITIES, terms=None):
    """Sum of modal-specific losses.

    ``embeddings[m]`` is ``(g1, g2, z1, z2)`` for modality m. Modalities not in
    ``modalities`` are left out of the sum. ``terms`` collects per-modality
    ``kl_<m>`` / ``align_<m>`` scalars when given.
    """
    total = 0.0
    for m in modalities:
        g1, g2, z1, z2 = embeddings[m]
        parts = {}
        total = total + modal_specific_loss(g1, g2, z1, z2, batch, w.beta[m], w.tau, parts)
        if terms is not None:
            terms[f"kl_{m}"] = parts["kl"]
            terms[f"align_{m}"] = parts["align"]
    return total
