"""Reference numerics for the training objective: contrastive, Dice, Focal, and weighted total.

Pure double-precision functions over pixel feature sets and mask pairs, meant
as ground truth for validating external training stacks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .imagecore import ForgemaskError, ParameterError
from .semanticmask import DenseFeatureMap, EditMask

DEFAULT_TAU = 0.1
DEFAULT_CAP = 4096
DEFAULT_GAMMA = 2.0
DEFAULT_ALPHA = 0.25
DEFAULT_WEIGHTS = (1.0, 4.0, 20.0)
_PROB_CLAMP = 1e-7
_NORM_EPS = 1e-12


class UndefinedLossError(ForgemaskError):
    """The loss has no defined value for this input (an empty pixel class)."""


@dataclass(frozen=True, eq=False)
class PixelFeatureSet:
    """Forged and real pixel feature vectors plus the softmax temperature.

    ``forged`` is (n_f, C), ``real`` is (n_r, C). Either side may be empty;
    contrastive_loss is the operation that rejects that.
    """

    forged: np.ndarray
    real: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        if self.forged.ndim != 2 or self.real.ndim != 2:
            raise ParameterError(
                f"feature sets must be 2-D, got {self.forged.ndim}-D and {self.real.ndim}-D"
            )
        if self.forged.shape[0] and self.real.shape[0] and self.forged.shape[1] != self.real.shape[1]:
            raise ParameterError(
                f"channel mismatch: forged {self.forged.shape[1]} vs real {self.real.shape[1]}"
            )
        if not (np.isfinite(self.forged).all() and np.isfinite(self.real).all()):
            raise ParameterError("feature vectors must be finite")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ParameterError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True, eq=False)
class MaskPair:
    """Predicted soft mask in [0,1] against a binary ground-truth mask."""

    predicted: np.ndarray
    truth: np.ndarray

    def __post_init__(self) -> None:
        if self.predicted.shape != self.truth.shape:
            raise ParameterError(
                f"mask shapes differ: {self.predicted.shape} vs {self.truth.shape}"
            )
        if self.predicted.size == 0:
            raise ParameterError("masks must be nonempty")
        if not np.isfinite(self.predicted).all():
            raise ParameterError("predicted mask must be finite")
        if self.predicted.min() < 0 or self.predicted.max() > 1:
            raise ParameterError("predicted mask values must lie in [0, 1]")
        if not np.isin(self.truth, (0, 1)).all():
            raise ParameterError("truth mask must be binary")


def _unit_rows(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(norms, _NORM_EPS)


def contrastive_loss(s: PixelFeatureSet) -> float:
    """Mean over forged anchors of -log[(1/n_f)·Σ_j e^{sim(f_i,f_j)/τ} / Σ_k e^{sim(f_i,r_k)/τ}].

    The j-sum runs over all forged pixels including the anchor itself.
    """
    n_f, n_r = s.forged.shape[0], s.real.shape[0]
    if n_f == 0 or n_r == 0:
        raise UndefinedLossError(f"needs both pixel classes, got n_f={n_f}, n_r={n_r}")
    ff = _unit_rows(s.forged)
    rr = _unit_rows(s.real)
    sim_ff = np.clip(ff @ ff.T, -1.0, 1.0)
    sim_fr = np.clip(ff @ rr.T, -1.0, 1.0)
    log_num = logsumexp(sim_ff / s.tau, axis=1) - np.log(n_f)
    log_den = logsumexp(sim_fr / s.tau, axis=1)
    return float(np.mean(log_den - log_num))


def sample_pixels(
    features: DenseFeatureMap,
    mask: EditMask,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
    tau: float = DEFAULT_TAU,
) -> PixelFeatureSet:
    """Partition cell vectors by the mask, capping each class by seeded sampling.

    Raises UndefinedLossError when the mask is all-zero or all-one, which
    callers treat as "skip this item".
    """
    if cap < 1:
        raise ParameterError(f"cap must be positive, got {cap}")
    if (mask.height, mask.width) != (features.grid_h, features.grid_w):
        raise ParameterError(
            f"mask {mask.width}x{mask.height} does not align with feature grid "
            f"{features.grid_w}x{features.grid_h}"
        )
    flat = features.values.reshape(-1, features.dim).astype(np.float64)
    bits = mask.bits.ravel().astype(bool)
    forged_idx = np.flatnonzero(bits)
    real_idx = np.flatnonzero(~bits)
    if forged_idx.size == 0 or real_idx.size == 0:
        raise UndefinedLossError(
            f"mask has a single class (edited fraction {mask.edited_fraction():.4f})"
        )
    rng = np.random.default_rng(seed)
    if forged_idx.size > cap:
        forged_idx = np.sort(rng.choice(forged_idx, size=cap, replace=False))
    if real_idx.size > cap:
        real_idx = np.sort(rng.choice(real_idx, size=cap, replace=False))
    return PixelFeatureSet(forged=flat[forged_idx], real=flat[real_idx], tau=tau)


def dice_loss(p: MaskPair, eps: float = 1.0) -> float:
    """1 - (2·ΣM̂M + ε)/(ΣM̂ + ΣM + ε)."""
    pred = p.predicted.astype(np.float64)
    truth = p.truth.astype(np.float64)
    inter = float((pred * truth).sum())
    return 1.0 - (2.0 * inter + eps) / (float(pred.sum()) + float(truth.sum()) + eps)


def focal_loss(p: MaskPair, gamma: float = DEFAULT_GAMMA, alpha: float = DEFAULT_ALPHA) -> float:
    """Mean of -α_t·(1-p_t)^γ·log(p_t) with probabilities clamped to [1e-7, 1-1e-7]."""
    if gamma < 0:
        raise ParameterError(f"gamma must be nonnegative, got {gamma}")
    if not 0 < alpha < 1:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    pred = np.clip(p.predicted.astype(np.float64), _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    hot = p.truth.astype(bool)
    p_t = np.where(hot, pred, 1.0 - pred)
    a_t = np.where(hot, alpha, 1.0 - alpha)
    return float(np.mean(-a_t * (1.0 - p_t) ** gamma * np.log(p_t)))


def total_loss(
    lc: float,
    ld: float,
    lf: float,
    lambda1: float = DEFAULT_WEIGHTS[0],
    lambda2: float = DEFAULT_WEIGHTS[1],
    lambda3: float = DEFAULT_WEIGHTS[2],
) -> float:
    """λ1·lc + λ2·ld + λ3·lf."""
    terms = (lc, ld, lf, lambda1, lambda2, lambda3)
    if not all(np.isfinite(t) for t in terms):
        raise ParameterError(f"total_loss inputs must be finite, got {terms}")
    return lambda1 * lc + lambda2 * ld + lambda3 * lf
