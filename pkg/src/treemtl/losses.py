"""Training objectives: binary cross-entropy, subcenter additive angular
margin loss, and their weighted combination."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError

ARCCOS_CLAMP = 1e-7  # keeps arccos and its derivative finite at cosine = +-1
NORM_TOLERANCE = 1e-3


@dataclass
class LossValue:
    """Scalar objective plus its per-sample breakdown.

    ``value`` is a 0-dim tensor connected to the autograd graph (the
    gradient handle); it equals ``per_sample.mean()``.
    """

    value: torch.Tensor
    per_sample: torch.Tensor

    def item(self):
        return float(self.value.detach())


def bce_loss(logits, labels):
    """Mean binary cross-entropy over sigmoid probabilities.

    Computed in the fused stable form max(z,0) - z*y + log(1 + exp(-|z|)),
    so saturated logits never produce log(0).

    Args:
        logits: (B, 1) or (B,) raw scores.
        labels: (B,) values in {0, 1}.
    """
    z = logits.reshape(-1)
    labels = torch.as_tensor(labels)
    if labels.shape != z.shape:
        raise ValueError(f"got {z.numel()} logits but {labels.numel()} labels")
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ValueError("fatigue labels must be binary (0 or 1)")
    y = labels.to(z.dtype)
    per_sample = torch.clamp_min(z, 0) - z * y + torch.log1p(torch.exp(-z.abs()))
    return LossValue(per_sample.mean(), per_sample)


class SubcenterClassifier(nn.Module):
    """Angular-margin weight bank: K subcenter columns per class.

    ``W`` has shape (embedding_dim, num_classes, subcenters); every column
    is L2-normalized before use, and a class's cosine to an embedding is
    the max over its subcenter columns.

    Args:
        num_classes: N, the number of identities being trained.
        subcenters: K (default 3).
        margin: additive angular margin m in radians (default 0.5).
        scale: logit scale s (default 20).
        embedding_dim: feature dimensionality (default 512).
        seed: deterministic initialization seed (random unit columns).
    """

    def __init__(
        self,
        num_classes,
        subcenters=3,
        margin=0.5,
        scale=20.0,
        embedding_dim=512,
        seed=0,
        dtype=torch.float32,
    ):
        super().__init__()
        if num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
        if subcenters < 1:
            raise ConfigError(f"subcenters must be >= 1, got {subcenters}")
        if margin < 0:
            raise ConfigError(f"margin must be >= 0, got {margin}")
        if scale <= 0:
            raise ConfigError(f"scale must be > 0, got {scale}")
        self.num_classes = num_classes
        self.subcenters = subcenters
        self.margin = float(margin)
        self.scale = float(scale)
        self.embedding_dim = embedding_dim
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(embedding_dim, num_classes, subcenters, generator=gen)
        w = w / w.norm(dim=0, keepdim=True)
        self.W = nn.Parameter(w.to(dtype))

    def normalized_weights(self):
        return self.W / self.W.norm(dim=0, keepdim=True)

    def config(self):
        return {
            "num_classes": self.num_classes,
            "subcenters": self.subcenters,
            "margin": self.margin,
            "scale": self.scale,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_config(cls, config, dtype=torch.float32):
        return cls(dtype=dtype, **config)


def arcface_subcenter_loss(embeddings, labels, clf):
    """Subcenter additive angular margin loss.

    Per sample, each class cosine is the best of its K subcenters; the true
    class's angle gets the additive margin before rescaling, and the
    cross-entropy is evaluated through a stable log-sum-exp. The arccos
    argument is clamped to [-1+1e-7, 1-1e-7], so an embedding that exactly
    coincides with a subcenter still yields finite loss and gradients.

    Args:
        embeddings: (B, D), rows unit-norm within 1e-3.
        labels: (B,) integer class ids in [0, num_classes).
        clf: SubcenterClassifier holding W, margin, scale.
    """
    if embeddings.dim() != 2 or embeddings.shape[1] != clf.embedding_dim:
        raise ValueError(
            f"expected (B, {clf.embedding_dim}) embeddings, got {tuple(embeddings.shape)}"
        )
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (embeddings.shape[0],):
        raise ValueError("labels must be a vector with one entry per embedding")
    if bool((labels < 0).any()) or bool((labels >= clf.num_classes).any()):
        raise ValueError(f"labels must lie in [0, {clf.num_classes})")
    norms = embeddings.detach().norm(dim=1)
    worst = float((norms - 1).abs().max())
    if worst > NORM_TOLERANCE:
        raise ValueError(f"embeddings must be unit-norm (max deviation {worst:.2e})")

    weights = clf.normalized_weights()  # (D, N, K)
    cosines = torch.einsum("bd,dnk->bnk", embeddings, weights).amax(dim=2)  # (B, N)
    cosines = cosines.clamp(-1 + ARCCOS_CLAMP, 1 - ARCCOS_CLAMP)

    batch = torch.arange(embeddings.shape[0])
    theta_true = torch.arccos(cosines[batch, labels])
    margined = clf.scale * torch.cos(theta_true + clf.margin)  # (B,)
    one_hot = torch.zeros_like(cosines)
    one_hot[batch, labels] = 1
    logits = clf.scale * cosines * (1 - one_hot) + margined.unsqueeze(1) * one_hot

    per_sample = torch.logsumexp(logits, dim=1) - margined
    return LossValue(per_sample.mean(), per_sample)


def combined_loss(l_drowsy, l_face, w):
    """Weighted two-task objective w * fatigue + (1 - w) * face, w in [0, 1]."""
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"loss weight must lie in [0, 1], got {w}")
    return w * l_drowsy + (1.0 - w) * l_face
