"""Triplet and morph-aware quadruplet hinge losses with verified gradients.

Both losses use squared euclidean distances between (optionally L2-normalized)
embeddings and reduce with the batch mean.  The quadruplet form adds a morph
embedding whose weighted distances to anchor, positive and negative all count
toward satisfying the margin, so training pushes bona fide material away from
morphed material.  Gradients come from autograd and are checked against the
central finite-difference oracle in this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class LossConfig:
    """Margin, cross-distance weights (anchor/negative, anchor/morph,
    negative/morph, positive/morph) and the embedding-normalization switch."""

    margin: float = 0.2
    weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    normalize_embeddings: bool = True

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be four non-negative values")


def _as_batch(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise ValueError(f"{name} must be a vector or a BxD batch, got shape {tuple(t.shape)}")
    return t


def _check_aligned(tensors: Sequence[torch.Tensor], names: Sequence[str]) -> None:
    ref = tensors[0]
    for t, name in zip(tensors[1:], names[1:]):
        if t.shape != ref.shape:
            raise ValueError(
                f"{names[0]} and {name} must align, got {tuple(ref.shape)} vs {tuple(t.shape)}")


def _maybe_normalize(t: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    if not cfg.normalize_embeddings:
        return t
    norms = t.norm(dim=-1, keepdim=True)
    if bool((norms < 1e-12).any()):
        raise ValueError("cannot normalize a zero embedding")
    return t / norms


def sq_euclidean(u, v) -> torch.Tensor:
    """Squared L2 distance; scalar for vectors, per-row for aligned batches."""
    tu = torch.as_tensor(u)
    tv = torch.as_tensor(v)
    if tu.shape != tv.shape:
        raise ValueError(f"dimension mismatch: {tuple(tu.shape)} vs {tuple(tv.shape)}")
    return ((tu - tv) ** 2).sum(dim=-1)


def triplet_hinge_args(anchor, positive, negative, cfg: LossConfig) -> torch.Tensor:
    """Per-item pre-hinge values d(a,p) - d(a,n) + margin."""
    a, p, n = (_as_batch(x, name) for x, name in
               zip((anchor, positive, negative), ("anchor", "positive", "negative")))
    _check_aligned((a, p, n), ("anchor", "positive", "negative"))
    a, p, n = (_maybe_normalize(t, cfg) for t in (a, p, n))
    return sq_euclidean(a, p) - sq_euclidean(a, n) + cfg.margin


def triplet_loss(anchor, positive, negative, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean over the batch of max(0, d(a,p) - d(a,n) + margin)."""
    return torch.clamp(triplet_hinge_args(anchor, positive, negative, cfg), min=0.0).mean()


def quadruplet_hinge_args(anchor, positive, negative, morph, cfg: LossConfig) -> torch.Tensor:
    """Per-item pre-hinge values d(a,p) + margin - sum of weighted cross distances."""
    names = ("anchor", "positive", "negative", "morph")
    a, p, n, m = (_as_batch(x, name) for x, name in zip((anchor, positive, negative, morph), names))
    _check_aligned((a, p, n, m), names)
    a, p, n, m = (_maybe_normalize(t, cfg) for t in (a, p, n, m))
    w_an, w_am, w_nm, w_pm = cfg.weights
    rhs = (w_an * sq_euclidean(a, n) + w_am * sq_euclidean(a, m)
           + w_nm * sq_euclidean(n, m) + w_pm * sq_euclidean(p, m))
    return sq_euclidean(a, p) + cfg.margin - rhs


def quadruplet_loss(anchor, positive, negative, morph, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean over the batch of max(0, d(a,p) + margin - weighted cross distances)."""
    return torch.clamp(quadruplet_hinge_args(anchor, positive, negative, morph, cfg), min=0.0).mean()


def value_and_grads(
    loss_fn: Callable[..., torch.Tensor], *inputs,
) -> tuple[float, tuple[np.ndarray, ...]]:
    """Evaluate a loss and its analytic gradients with respect to every input."""
    leaves = [torch.as_tensor(x).double().clone().requires_grad_(True) for x in inputs]
    value = loss_fn(*leaves)
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    out = tuple(
        (g if g is not None else torch.zeros_like(leaf)).detach().numpy().copy()
        for g, leaf in zip(grads, leaves))
    return float(value.detach()), out


def numerical_gradient(
    loss_fn: Callable[..., torch.Tensor],
    inputs: Sequence,
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central finite differences (L(x+eps) - L(x-eps)) / (2 eps) per coordinate."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    base = [torch.as_tensor(x).double().clone() for x in inputs]
    grads = []
    with torch.no_grad():
        for idx, tensor in enumerate(base):
            grad = torch.zeros_like(tensor)
            flat = tensor.view(-1)
            gflat = grad.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = float(loss_fn(*base))
                flat[k] = orig - eps
                down = float(loss_fn(*base))
                flat[k] = orig
                gflat[k] = (up - down) / (2.0 * eps)
            grads.append(grad.numpy().copy())
    return grads
