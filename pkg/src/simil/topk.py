"""Patch selection by score rank: hard top-k and a noise-smoothed relaxation.

The relaxed form averages hard selections over Gaussian perturbations of the
scores. Its gradient correlates the upstream signal with the noise that
produced each sampled ranking, so selection stays crisp in the forward pass
while remaining trainable end to end.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class TopKConfig:
    k: int = 20
    sigma: float = 0.05
    n_samples: int = 64

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (self.sigma > 0):
            raise ValueError("sigma must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def rank_indices(scores, k):
    """Indices of the k largest scores, descending; ties go to the lower index.

    Bags shorter than k repeat the lowest-ranked index to fill the quota and
    report it through the second return value."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ad.ShapeError("rank_indices expects a non-empty 1-D array")
    order = np.argsort(-s, kind="stable")
    if s.size >= k:
        return order[:k].copy(), False
    pad = np.full(k - s.size, order[-1], dtype=order.dtype)
    return np.concatenate([order, pad]), True


def hard_topk(scores, k):
    """(k, n) indicator whose r-th row is one-hot at the rank-r index."""
    s = np.asarray(scores, dtype=np.float64)
    ranked, padded = rank_indices(s, k)
    out = np.zeros((k, s.size))
    out[np.arange(k), ranked] = 1.0
    return out, padded


def hard_topk_node(scores, k):
    """Hard selection as a graph node; the ranking passes no gradient back."""
    if not isinstance(scores, ad.Tensor):
        raise ad.ShapeError("hard_topk_node expects a Tensor of scores")
    out, padded = hard_topk(scores.data, k)
    node = ad.custom(out, (scores,),
                     lambda g: (np.zeros_like(scores.data),), op="hard_topk")
    return node, padded


def perturbed_topk(scores, cfg, rng=None, noise=None):
    """Smoothed top-k indicator: mean of hard selections over noisy scores.

    Each of the cfg.n_samples rankings sorts scores + cfg.sigma * eps with
    standard normal eps. The VJP is the perturbed-maximizer estimator
        (1 / (S * sigma)) * sum_s (F_s - F_0) * eps_s,
    where F_s contracts the upstream signal with sample s's hard indicator
    and F_0 does the same with the noiseless one. Subtracting the constant
    F_0 leaves the estimator unbiased but silences the samples whose ranking
    never flipped, which is most of them at small sigma. An explicit
    (n_samples, n) noise array overrides rng when reproducing a draw matters
    more than convenience.
    """
    if not isinstance(scores, ad.Tensor):
        raise ad.ShapeError("perturbed_topk expects a Tensor of scores")
    s = scores.data
    if s.ndim != 1 or s.size == 0:
        raise ad.ShapeError("perturbed_topk expects a non-empty 1-D score tensor")
    n = s.size
    S, k, sigma = cfg.n_samples, cfg.k, cfg.sigma
    if noise is None:
        if rng is None:
            raise ad.ContractError("perturbed_topk needs an rng or explicit noise")
        noise = rng.standard_normal((S, n))
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (S, n):
            raise ad.ShapeError(f"noise must have shape ({S}, {n})")

    order = np.argsort(-(s[None, :] + sigma * noise), axis=1, kind="stable")
    if n >= k:
        ranked = order[:, :k]
        padded = False
    else:
        ranked = np.concatenate(
            [order, np.repeat(order[:, -1:], k - n, axis=1)], axis=1)
        padded = True
    samples = np.zeros((S, k, n))
    samples[np.arange(S)[:, None], np.arange(k)[None, :], ranked] = 1.0

    hard0, _ = hard_topk(s, k)

    def vjp(g):
        contracted = np.einsum("kn,skn->s", g, samples) - float((g * hard0).sum())
        return ((contracted[:, None] * noise).sum(axis=0) / (S * sigma),)

    return ad.custom(samples.mean(axis=0), (scores,), vjp, op="perturbed_topk"), padded


def select_features(indicator, rows):
    """(k, n) indicator times (n, d) features: the selected rows, rank-ordered.

    Hard indicators extract rows exactly; soft ones hand over convex blends."""
    if indicator.data.ndim != 2 or rows.data.ndim != 2:
        raise ad.ShapeError("select_features expects two matrices")
    if indicator.data.shape[1] != rows.data.shape[0]:
        raise ad.ShapeError(
            f"select_features: {indicator.data.shape} @ {rows.data.shape}")
    return ad.matmul(indicator, rows)
