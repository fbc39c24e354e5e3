"""Training objectives: cosine similarity, the in-batch contrastive loss,
masked-pixel reconstruction, and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_NORM_FLOOR = 1e-12


@dataclass
class LossReport:
    """Per-step loss breakdown. ``total`` is exactly recon + weight * contrastive."""

    recon: float
    contrastive: float
    contrastive_weight: float
    temperature: float
    total: float


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors; rejects zero-norm inputs."""
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"cosine_sim: expected matching vectors, got {a.shape} and {b.shape}")
    norm_a = float(np.linalg.norm(a.data))
    norm_b = float(np.linalg.norm(b.data))
    if norm_a < _NORM_FLOOR or norm_b < _NORM_FLOOR:
        raise ValueError("cosine_sim: zero-norm input (degenerate embedding)")
    dot = ad.tensor_sum(a * b)
    return dot / (ad.sqrt(ad.tensor_sum(ad.square(a))) * ad.sqrt(ad.tensor_sum(ad.square(b))))


def _normalize_rows(x: Tensor, label: str) -> Tensor:
    norms_sq = ad.tensor_sum(ad.square(x), axis=-1, keepdims=True)
    if np.any(norms_sq.data < _NORM_FLOOR**2):
        raise ValueError(f"infonce: zero-norm row in {label} (degenerate embedding)")
    return x / ad.sqrt(norms_sq)


def infonce(online: Tensor, target: Tensor, tau: float) -> Tensor:
    """In-batch contrastive loss over K projection pairs.

    Row i of ``online`` pairs positively with row i of ``target``; the
    other K-1 target rows are its negatives. Per-sample loss is
    -log softmax(similarities / tau) at the positive entry, averaged over
    the batch, computed through a stabilized log-sum-exp.
    """
    if online.ndim != 2 or online.shape != target.shape:
        raise ValueError(
            f"infonce: expected matching (K, D) inputs, got {online.shape} and {target.shape}"
        )
    k = online.shape[0]
    if k < 2:
        raise ValueError(f"infonce: batch of {k} has no negatives; need K >= 2")
    if tau <= 0:
        raise ValueError(f"infonce: temperature must be positive, got {tau}")

    sims = _normalize_rows(online, "online") @ ad.transpose(_normalize_rows(target, "target"))
    logits = sims * (1.0 / tau)
    eye = Tensor(np.eye(k, dtype=online.data.dtype))
    positives = ad.tensor_sum(logits * eye, axis=1)
    per_sample = ad.logsumexp(logits, axis=1) - positives
    return ad.mean(per_sample)


def recon_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Per-element mean squared error over all masked-patch elements."""
    if pred.shape != target.shape:
        raise ValueError(f"recon_loss: shape mismatch, {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("recon_loss: no masked patches")
    return ad.mean(ad.square(pred - target))


def total_loss(
    recon: Tensor, contrastive: Tensor | None, contrastive_weight: float, tau: float
) -> tuple[Tensor, LossReport]:
    """Weighted combination; ``contrastive=None`` means the pure-MAE ablation."""
    if contrastive_weight < 0:
        raise ValueError(f"total_loss: weight must be >= 0, got {contrastive_weight}")
    if contrastive is None or contrastive_weight == 0.0:
        combined = recon
        c_value = 0.0 if contrastive is None else contrastive.item()
    else:
        combined = recon + contrastive * contrastive_weight
        c_value = contrastive.item()
    report = LossReport(
        recon=recon.item(),
        contrastive=c_value,
        contrastive_weight=contrastive_weight,
        temperature=tau,
        total=combined.item(),
    )
    return combined, report
