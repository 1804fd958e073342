"""Adaptive weighting layer: a learned convex combination of branch probabilities.

Four unconstrained scalars ``alpha`` parameterize normalized weights
``w = softmax(alpha)``; the ensemble score for an image is ``sum_i w_i * p_i``
where ``p_i`` is branch i's positive-class probability. Because the weights
are a convex combination, the fused score always lies between the smallest
and largest branch probability, and it is differentiable in both ``alpha``
and ``p`` so the whole ensemble trains with ordinary backpropagation:

    d fused / d p_i     = w_i
    d fused / d alpha_j = w_j * (p_j - fused)

The analytic forms here are the reference; the torch ``FusionLayer`` used by
the trainer is checked against them (and against finite differences) in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import MldeError

NUM_BRANCHES = 4


def _softmax(alpha: np.ndarray) -> np.ndarray:
    z = alpha - alpha.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class FusionParameters:
    """The four free fusion scalars (float64)."""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        if alpha.shape != (NUM_BRANCHES,):
            raise MldeError(f"alpha must have {NUM_BRANCHES} components, got {alpha.shape}")
        if not np.isfinite(alpha).all():
            raise MldeError(f"alpha must be finite, got {alpha}")
        object.__setattr__(self, "alpha", alpha)

    def normalized_weights(self) -> np.ndarray:
        """w = softmax(alpha): positive, sums to 1."""
        return _softmax(self.alpha)

    @classmethod
    def zeros(cls) -> "FusionParameters":
        return cls(np.zeros(NUM_BRANCHES))


def _check_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape != (NUM_BRANCHES,):
        raise MldeError(f"expected {NUM_BRANCHES} branch probabilities, got {p.shape}")
    if not np.isfinite(p).all():
        raise MldeError(f"branch probabilities must be finite, got {p}")
    return p


def fuse(p, params: FusionParameters) -> float:
    """Fused probability sum_i softmax(alpha)_i * p_i."""
    p = _check_probs(p)
    w = params.normalized_weights()
    return float(w @ p)


def fuse_gradients(p, params: FusionParameters, upstream: float):
    """Exact gradients of ``upstream * fuse(p, params)``.

    Returns (grad_alpha, grad_p), each a float64 array of length 4.
    """
    p = _check_probs(p)
    if not np.isfinite(upstream):
        raise MldeError(f"upstream gradient must be finite, got {upstream}")
    w = params.normalized_weights()
    fused = float(w @ p)
    grad_p = upstream * w
    grad_alpha = upstream * w * (p - fused)
    return grad_alpha, grad_p


def shift_alpha(params: FusionParameters, c: float) -> FusionParameters:
    """Add a constant to every alpha; softmax (and so fuse) is unchanged."""
    if not np.isfinite(c):
        raise MldeError(f"shift must be finite, got {c}")
    return FusionParameters(params.alpha + c)


def canonicalize(params: FusionParameters) -> FusionParameters:
    """Shift so that the alphas sum to zero (for checkpoint comparison)."""
    return shift_alpha(params, -float(params.alpha.mean()))


class FusionLayer(torch.nn.Module):
    """Trainable convex-combination layer used inside the ensemble model.

    alpha starts at zero, i.e. equal weighting of the four branches.
    """

    def __init__(self):
        super().__init__()
        self.alpha = torch.nn.Parameter(torch.zeros(NUM_BRANCHES))

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.alpha, dim=0)

    def forward(self, branch_probs: torch.Tensor) -> torch.Tensor:
        """branch_probs: (B, 4) -> fused: (B,)."""
        return branch_probs @ self.weights()

    def parameters_snapshot(self) -> FusionParameters:
        return FusionParameters(self.alpha.detach().cpu().double().numpy().copy())
