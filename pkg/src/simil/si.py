"""Interpretable branch: patch-context mixer, feature gating, linear head.

The branch stays linear in the handcrafted features it scores: the mixer and
the gated attention only decide how much each feature column counts (beta),
and the prediction is a plain weighted sum of beta-scaled original values.
That keeps every logit decomposable into per-patch, per-feature terms.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class BetaConfig:
    gamma: float = 0.75
    t: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not (self.t > 0):
            raise ValueError("t must be positive")


@dataclass(frozen=True)
class SiConfig:
    n_features: int
    k: int = 20
    mixer_layers: int = 4
    attn_dim: int = 64
    beta: BetaConfig = field(default_factory=BetaConfig)

    def __post_init__(self):
        if self.n_features < 2:
            raise ValueError("need at least two feature columns")
        if self.k < 1 or self.attn_dim < 1:
            raise ValueError("k and attn_dim must be positive")
        if self.mixer_layers < 0:
            raise ValueError("mixer_layers must be >= 0")


def init_si_params(cfg, rng):
    """Parameter set keyed with the si. prefix used in checkpoints.

    Mixer output projections start at zero so the fresh mixer is the
    identity and the branch begins as a plain linear model."""
    d, k, a = cfg.n_features, cfg.k, cfg.attn_dim

    def dense(fan_in, shape):
        return ad.Tensor(rng.standard_normal(shape) / np.sqrt(fan_in))

    params = {}
    for i in range(cfg.mixer_layers):
        params[f"si.mixer.{i}.patch.w1"] = dense(k, (k, 2 * k))
        params[f"si.mixer.{i}.patch.b1"] = ad.Tensor(np.zeros(2 * k))
        params[f"si.mixer.{i}.patch.w2"] = ad.Tensor(np.zeros((2 * k, k)))
        params[f"si.mixer.{i}.patch.b2"] = ad.Tensor(np.zeros(k))
        params[f"si.mixer.{i}.feat.w1"] = dense(d, (d, 2 * d))
        params[f"si.mixer.{i}.feat.b1"] = ad.Tensor(np.zeros(2 * d))
        params[f"si.mixer.{i}.feat.w2"] = ad.Tensor(np.zeros((2 * d, d)))
        params[f"si.mixer.{i}.feat.b2"] = ad.Tensor(np.zeros(d))
    params["si.attn.v"] = dense(k, (k, a))
    params["si.attn.u"] = dense(k, (k, a))
    params["si.attn.w"] = dense(a, (a,))
    params["si.head.w"] = dense(d, (d,))
    params["si.head.b"] = ad.Tensor(0.0)
    return params


def _mlp(x, w1, b1, w2, b2):
    return ad.add_bias(ad.matmul(ad.silu(ad.add_bias(ad.matmul(x, w1), b1)),
                                 w2), b2)


def pf_mixer(params, cfg, m_t):
    """Contextualize a (d, k) feature-by-patch block.

    Each layer first mixes along patches (every feature row sees the whole
    bag), then along features (every patch column sees its own profile),
    both with residual connections."""
    if m_t.data.ndim != 2 or m_t.data.shape != (cfg.n_features, cfg.k):
        raise ad.ShapeError(
            f"pf_mixer expects ({cfg.n_features}, {cfg.k}), got {m_t.data.shape}")
    x = m_t
    for i in range(cfg.mixer_layers):
        p = f"si.mixer.{i}"
        x = ad.add(x, _mlp(x, params[f"{p}.patch.w1"], params[f"{p}.patch.b1"],
                           params[f"{p}.patch.w2"], params[f"{p}.patch.b2"]))
        across = _mlp(ad.transpose(x),
                      params[f"{p}.feat.w1"], params[f"{p}.feat.b1"],
                      params[f"{p}.feat.w2"], params[f"{p}.feat.b2"])
        x = ad.add(x, ad.transpose(across))
    return x


def raw_feature_scores(params, contextualized):
    """Gated attention over each feature row's k-vector -> one raw score."""
    gated = ad.mul(ad.tanh(ad.matmul(contextualized, params["si.attn.v"])),
                   ad.sigmoid(ad.matmul(contextualized, params["si.attn.u"])))
    return ad.matmul(gated, params["si.attn.w"])


def beta_from_raw(raw, beta_cfg):
    """Sparsify raw scores: center on the gamma-percentile, scale by the
    population std, squash with temperature t.  Zero spread maps to 0.5."""
    if raw.data.ndim != 1 or raw.data.size < 2:
        raise ad.ShapeError("beta_from_raw expects at least two scores")
    centered = ad.sub(raw, ad.mean(raw))
    std = ad.sqrt(ad.mean(ad.mul(centered, centered)))
    if std.data == 0.0:
        # constant scores carry no ranking signal; pin everything to 1/2
        return ad.sigmoid(ad.mul(raw, 0.0))
    shifted = ad.sub(raw, ad.quantile(raw, beta_cfg.gamma))
    return ad.sigmoid(ad.mul(ad.div(shifted, std), beta_cfg.t))


def feature_attention(params, cfg, contextualized):
    """(d, k) context block -> beta in (0, 1)^d."""
    return beta_from_raw(raw_feature_scores(params, contextualized), cfg.beta)


def linear_predict(params, selected, beta):
    """Score the ORIGINAL selected features, gated per column by beta.

    Returns the bag probability, per-patch logits (w . (beta * row) + b),
    and the (k, d) contribution tensor w_j * beta_j * M_ij whose grand total
    plus k*b is exactly the bag logit."""
    scaled = ad.mul_rowvec(selected, beta)
    per_patch = ad.add(ad.matmul(scaled, params["si.head.w"]),
                       params["si.head.b"])
    contributions = ad.mul_rowvec(scaled, params["si.head.w"])
    return ad.sigmoid(ad.sum_(per_patch)), per_patch, contributions


def si_forward(params, cfg, selected):
    """Full branch on a (k, d) block of selected patch features."""
    if selected.data.ndim != 2 or selected.data.shape != (cfg.k, cfg.n_features):
        raise ad.ShapeError(
            f"si_forward expects ({cfg.k}, {cfg.n_features}), got {selected.data.shape}")
    contextualized = pf_mixer(params, cfg, ad.transpose(selected))
    beta = feature_attention(params, cfg, contextualized)
    y_f, per_patch, contributions = linear_predict(params, selected, beta)
    return y_f, per_patch, beta, contributions
