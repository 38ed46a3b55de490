"""Deep-feature bag classifier: projector, gated patch attention, additive head.

The head sums one logit per attention-weighted patch before the sigmoid, so
each patch's marginal contribution to the bag decision stays readable.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class MilConfig:
    in_dim: int
    hidden_dim: int = 128
    attn_dim: int = 64
    use_projector: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.hidden_dim < 1 or self.attn_dim < 1:
            raise ValueError("dimensions must be positive")

    @property
    def embed_dim(self):
        """Width the attention and head actually see."""
        return self.hidden_dim if self.use_projector else self.in_dim


def init_mil_params(cfg, rng):
    """Fresh parameter set, keyed with the mil. prefix used in checkpoints."""
    e, a = cfg.embed_dim, cfg.attn_dim

    def dense(fan_in, shape):
        return ad.Tensor(rng.standard_normal(shape) / np.sqrt(fan_in))

    params = {}
    if cfg.use_projector:
        params["mil.proj.w"] = dense(cfg.in_dim, (cfg.in_dim, cfg.hidden_dim))
        params["mil.proj.b"] = ad.Tensor(np.zeros(cfg.hidden_dim))
    params["mil.attn.v"] = dense(e, (e, a))
    params["mil.attn.u"] = dense(e, (e, a))
    params["mil.attn.w"] = dense(a, (a,))
    params["mil.head.w"] = dense(e, (e,))
    params["mil.head.b"] = ad.Tensor(0.0)
    return params


def project(params, cfg, g):
    """(n, D) deep features -> (n, e) embeddings; identity under the ablation."""
    if g.data.ndim != 2 or g.data.shape[1] != cfg.in_dim:
        raise ad.ShapeError(f"project expects (n, {cfg.in_dim}), got {g.data.shape}")
    if not cfg.use_projector:
        return g
    return ad.relu(ad.add_bias(ad.matmul(g, params["mil.proj.w"]),
                               params["mil.proj.b"]))


def patch_attention(params, embedded):
    """Gated attention over patches: alpha = softmax(w . (tanh(xV) * sig(xU)))."""
    gated = ad.mul(ad.tanh(ad.matmul(embedded, params["mil.attn.v"])),
                   ad.sigmoid(ad.matmul(embedded, params["mil.attn.u"])))
    scores = ad.matmul(gated, params["mil.attn.w"])
    return ad.softmax(scores, axis=-1), scores


def additive_predict(params, embedded, alpha):
    """Bag probability and the per-patch logits it sums.

    logit_i = w . (alpha_i * x_i) + b; bag = sigmoid(sum_i logit_i)."""
    weighted = ad.mul_colvec(embedded, alpha)
    per_patch = ad.add(ad.matmul(weighted, params["mil.head.w"]),
                       params["mil.head.b"])
    return ad.sigmoid(ad.sum_(per_patch)), per_patch
