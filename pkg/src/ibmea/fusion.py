"""Entity-level attention fusion and the modal-hybrid contrastive regularizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import MODALITIES
from .errors import ConfigError

logger = logging.getLogger(__name__)


class FusionParams(nn.Module):
    """Query vector q_o plus one affine projection (W_m, b_m) per modality into dim ``d``."""

    def __init__(self, in_dims, d=100):
        super().__init__()
        self.d = d
        self.proj = nn.ModuleDict({m: nn.Linear(in_dims[m], d) for m in MODALITIES})
        self.query = nn.Parameter(torch.empty(d))
        nn.init.normal_(self.query, std=d**-0.5)


@dataclass
class HybridEmbedding:
    z_o: torch.Tensor  # (n, d)
    attention: torch.Tensor  # (n, 4), columns in MODALITIES order
    projected: dict  # modality -> (n, d) projected embedding W_m z_m + b_m
    scores: torch.Tensor  # (n, 4), -inf for excluded modalities


def attention_weights(scores):
    """Row-wise softmax over modality scores; -inf entries get weight 0."""
    return torch.softmax(scores, dim=1)


def fuse(z_all, params, modalities=None):
    """Attention-weighted sum of projected modal embeddings.

    With ``modalities`` given, the softmax runs over that subset only (the
    others get weight 0); otherwise all four must be present in ``z_all``.
    """
    if modalities is None:
        missing = [m for m in MODALITIES if m not in z_all]
        if missing:
            raise ConfigError(f"fusion needs all modalities, missing {missing}")
        modalities = MODALITIES
    if not modalities:
        raise ConfigError("fusion over an empty modality set")
    projected, cols = {}, []
    n = next(iter(z_all[m] for m in modalities)).shape[0]
    ref = z_all[modalities[0]]
    for m in MODALITIES:
        if m in modalities:
            p = params.proj[m](z_all[m])
            projected[m] = p
            cols.append(torch.tanh(p) @ params.query)
        else:
            cols.append(torch.full((n,), -torch.inf, dtype=ref.dtype))
    scores = torch.stack(cols, dim=1)
    alpha = attention_weights(scores)
    z_o = sum(alpha[:, MODALITIES.index(m), None] * projected[m] for m in modalities)
    return HybridEmbedding(z_o=z_o, attention=alpha, projected=projected, scores=scores)


def discriminate(z1, z2):
    """D(z1, z2) = sigmoid(<z1, z2>)."""
    return torch.sigmoid((z1 * z2).sum(-1))


def discriminator_bound(z1, z2, batch):
    """sum log D(pos) + sum log(1 - D(neg)) with in-batch negatives.

    This is the mutual-information lower bound; its negation is a loss.
    """
    logits = z1[batch.left] @ z2[batch.right].T
    pos = torch.diagonal(logits)
    off = ~torch.eye(len(batch), dtype=torch.bool)
    return F.logsigmoid(pos).sum() + F.logsigmoid(-logits[off]).sum()


@dataclass
class MSLossConfig:
    alpha_pos: float = 2.0
    beta_neg: float = 50.0
    lambda_margin: float = 0.5
    epsilon_mine: float = 0.1

    def __post_init__(self):
        if min(self.alpha_pos, self.beta_neg, self.epsilon_mine) <= 0:
            raise ConfigError("multi-similarity scales and mining margin must be positive")
        if not 0 < self.lambda_margin < 1:
            raise ConfigError(f"lambda_margin={self.lambda_margin} outside (0, 1)")


def _cosine_matrix(a, b):
    na, nb = a.norm(dim=-1, keepdim=True), b.norm(dim=-1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise FloatingPointError("zero-norm fused embedding")
    return (a / na) @ (b / nb).T


def _ms_anchor_losses(pos, neg, neg_mask, cfg):
    """Per-anchor multi-similarity loss for one positive per anchor.

    pos (B,), neg (B, K), neg_mask (B, K) marks real negatives.
    Returns (loss (B,), active (B,) bool).
    """
    a, b, lam, eps = cfg.alpha_pos, cfg.beta_neg, cfg.lambda_margin, cfg.epsilon_mine
    has_neg = neg_mask.any(dim=1)
    neg_det = neg.detach().masked_fill(~neg_mask, -torch.inf)
    hard_neg = neg_mask & (neg.detach() + eps > pos.detach()[:, None])
    hard_pos = ~has_neg | (pos.detach() - eps < neg_det.max(dim=1).values)

    pos_term = F.softplus(-a * (pos - lam)) / a
    pos_term = torch.where(hard_pos, pos_term, torch.zeros_like(pos_term))

    neg_logits = (b * (neg - lam)).masked_fill(~hard_neg, -torch.inf)
    zero = torch.zeros_like(pos)[:, None]
    neg_term = torch.logsumexp(torch.cat([zero, neg_logits], dim=1), dim=1) / b

    return pos_term + neg_term, hard_pos | hard_neg.any(dim=1)


def multi_similarity_loss(z1, z2, batch, cfg=None, stats=None):
    """Bidirectional multi-similarity loss over cosine similarities of fused embeddings.

    Anchors run over kg1 heads (1->2) and kg2 tails (2->1); anchors left with
    no mined pair are skipped and counted in ``stats["skipped"]``.
    """
    cfg = cfg or MSLossConfig()
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.neg2 is None:
        s = _cosine_matrix(z1[batch.left], z2[batch.right])
        mask = ~torch.eye(len(batch), dtype=torch.bool)
        directions = [(torch.diagonal(s), s, mask), (torch.diagonal(s), s.T, mask)]
    else:
        a, b = z1[batch.left], z2[batch.right]
        pos = F.cosine_similarity(a, b, dim=-1)
        n12 = F.cosine_similarity(a[:, None, :], z2[batch.neg2], dim=-1)
        n21 = F.cosine_similarity(b[:, None, :], z1[batch.neg1], dim=-1)
        ones = torch.ones_like(n12, dtype=torch.bool)
        directions = [(pos, n12, ones), (pos, n21, ones)]
    losses, active = [], []
    for pos, neg, mask in directions:
        l, act = _ms_anchor_losses(pos, neg, mask, cfg)
        losses.append(l)
        active.append(act)
    losses, active = torch.cat(losses), torch.cat(active)
    skipped = int((~active).sum())
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
    if skipped:
        logger.debug("multi-similarity: %d of %d anchors had no mined pairs", skipped, len(active))
    if not active.any():
        return losses.sum() * 0.0
    return losses[active].mean()


def hybrid_contrastive_loss(h1, h2, batch, cfg=None, use_discriminator=False, stats=None):
    z1 = h1.z_o if isinstance(h1, HybridEmbedding) else h1
    z2 = h2.z_o if isinstance(h2, HybridEmbedding) else h2
    loss = multi_similarity_loss(z1, z2, batch, cfg, stats)
    if use_discriminator:
        n_terms = len(batch) ** 2
        loss = loss - discriminator_bound(z1, z2, batch) / n_terms
    return loss
