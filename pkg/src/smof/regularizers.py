"""Structured-sparsity penalties on Filter Skeletons / Filter Masks and their proximal steps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import FilterSkeleton, edge_flat_index

GROUP_ADAPTIVE = "group-adaptive"
L1_UNIFORM = "l1-uniform"
PENALTY_MODES = (GROUP_ADAPTIVE, L1_UNIFORM)


@dataclass
class PenaltyConfig:
    """Penalty strengths.

    ``alpha`` scales the per-slice skeleton penalty, ``beta`` the l1 penalty
    on mask entries. ``scaled_gradient_step`` also multiplies the skeleton's
    gradient step by the slice coefficient.
    """

    alpha: float = 0.0
    beta: float = 0.0
    penalty_mode: str = GROUP_ADAPTIVE
    scaled_gradient_step: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if self.penalty_mode not in PENALTY_MODES:
            raise ValueError(f"unknown penalty mode {self.penalty_mode!r}; expected one of {PENALTY_MODES}")


def alpha_coefficient(K: int, i: int, alpha: float) -> float:
    """Slice weight: outer slices get proportionally larger penalties."""
    if not 1 <= i <= K // 2:
        raise ValueError(f"slice index {i} out of range for K={K}")
    return (K // 2 + 1 - i) * alpha


def group_norm(fs: FilterSkeleton, i: int) -> float:
    """Sum over the four edges of slice ``i`` of each edge's l2 norm."""
    flat = fs.values.data.reshape(-1).astype(np.float64)
    return float(sum(np.linalg.norm(flat[edge_flat_index(fs.kernel_size, i, j)]) for j in range(1, 5)))


def _skeletons(model):
    return [fs for _, fs in model.skeletons()] if model.masked else []


def fs_penalty(model, cfg: PenaltyConfig) -> float:
    total = 0.0
    for fs in _skeletons(model):
        if cfg.penalty_mode == GROUP_ADAPTIVE:
            for i in fs.active_slices():
                total += alpha_coefficient(fs.kernel_size, i, cfg.alpha) * group_norm(fs, i)
        else:
            total += cfg.alpha * float(np.abs(fs.values.data[~fs.frozen]).astype(np.float64).sum())
    return total


def fm_penalty(model, cfg: PenaltyConfig) -> float:
    if not model.masked:
        return 0.0
    return cfg.beta * sum(
        float(np.abs(fm.values.data[fm.active]).astype(np.float64).sum()) for fm in model.masks.values()
    )


# differentiable forms (used for the loss graph and gradient checks)


def fs_penalty_tensor(model, cfg: PenaltyConfig) -> Tensor | None:
    terms = []
    for fs in _skeletons(model):
        K = fs.kernel_size
        if cfg.penalty_mode == GROUP_ADAPTIVE:
            for i in fs.active_slices():
                a = alpha_coefficient(K, i, cfg.alpha)
                for j in range(1, 5):
                    terms.append(ad.mul_scalar(ad.l2norm(ad.take(fs.values, edge_flat_index(K, i, j))), a))
        else:
            idx = np.flatnonzero(~fs.frozen.reshape(-1))
            terms.append(ad.mul_scalar(ad.tensor_sum(ad.absolute(ad.take(fs.values, idx))), cfg.alpha))
    return _sum_terms(terms)


def fm_penalty_tensor(model, cfg: PenaltyConfig) -> Tensor | None:
    if not model.masked or cfg.beta == 0:
        return None
    terms = []
    for fm in model.masks.values():
        idx = np.flatnonzero(fm.active)
        if idx.size:
            terms.append(ad.mul_scalar(ad.tensor_sum(ad.absolute(ad.take(fm.values, idx))), cfg.beta))
    return _sum_terms(terms)


def _sum_terms(terms):
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


# proximal operators


def prox_group(x: np.ndarray, t: float) -> np.ndarray:
    """argmin_z 0.5*||z - x||^2 + t*||z||_2, i.e. block soft-thresholding."""
    if t < 0:
        raise ValueError("prox threshold must be non-negative")
    x = np.asarray(x)
    norm = np.linalg.norm(x)
    if norm <= t:
        return np.zeros_like(x)
    return x * ((norm - t) / norm)


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    """Elementwise prox of t*|.|."""
    if t < 0:
        raise ValueError("prox threshold must be non-negative")
    x = np.asarray(x)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0).astype(x.dtype)


def fs_prox_step(fs: FilterSkeleton, grad: np.ndarray | None, eta: float, cfg: PenaltyConfig) -> None:
    """One proximal-gradient update of a skeleton, in place.

    ``grad`` is the K x K gradient of the data loss w.r.t. the skeleton.
    Frozen entries are left at zero. In group-adaptive mode the center cell
    takes a plain gradient step; in l1-uniform mode every unfrozen entry,
    center included, is soft-thresholded.
    """
    if grad is None:
        raise ValueError("missing skeleton gradient")
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    K = fs.kernel_size
    vals = fs.values.data
    flat = vals.reshape(-1)
    g = np.asarray(grad, dtype=vals.dtype).reshape(-1)
    if g.shape != flat.shape:
        raise ValueError(f"gradient shape {np.shape(grad)} does not match skeleton {vals.shape}")

    if cfg.penalty_mode == L1_UNIFORM:
        free = ~fs.frozen.reshape(-1)
        flat[free] = soft_threshold(flat[free] - eta * g[free], eta * cfg.alpha)
        return

    for i in fs.active_slices():
        a = alpha_coefficient(K, i, cfg.alpha)
        scale = eta * a if cfg.scaled_gradient_step else eta
        for j in range(1, 5):
            idx = edge_flat_index(K, i, j)
            flat[idx] = prox_group(flat[idx] - scale * g[idx], eta * a)
    # the center carries no penalty term
    c = (K // 2) * K + K // 2
    flat[c] -= eta * g[c]
