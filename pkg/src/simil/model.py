"""Dual-branch bag model: deep attention branch feeding a feature-level
interpretable branch through score-ranked patch selection.

The deep branch scores patches and predicts from all of them; its attention
drives which handcrafted-feature rows the interpretable branch sees. Both
predictions come back together with everything a report needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mil, si, topk
from .featio import Checkpoint, FormatError

MODES = ("train", "eval", "train_barrier")


@dataclass(frozen=True)
class ModelConfig:
    deep_dim: int
    path_dim: int
    hidden_dim: int = 128
    attn_dim: int = 64
    mixer_layers: int = 4
    si_attn_dim: int = 64
    topk: topk.TopKConfig = field(default_factory=topk.TopKConfig)
    beta: si.BetaConfig = field(default_factory=si.BetaConfig)
    use_projector: bool = True
    pathfeat_only: bool = False

    def __post_init__(self):
        if self.deep_dim < 1 or self.path_dim < 2:
            raise ValueError("deep_dim >= 1 and path_dim >= 2 required")

    @property
    def mil_config(self):
        return mil.MilConfig(
            in_dim=self.path_dim if self.pathfeat_only else self.deep_dim,
            hidden_dim=self.hidden_dim, attn_dim=self.attn_dim,
            use_projector=self.use_projector)

    @property
    def si_config(self):
        return si.SiConfig(n_features=self.path_dim, k=self.topk.k,
                           mixer_layers=self.mixer_layers,
                           attn_dim=self.si_attn_dim, beta=self.beta)

    def to_json(self):
        return {
            "deep_dim": self.deep_dim, "path_dim": self.path_dim,
            "hidden_dim": self.hidden_dim, "attn_dim": self.attn_dim,
            "mixer_layers": self.mixer_layers, "si_attn_dim": self.si_attn_dim,
            "topk": {"k": self.topk.k, "sigma": self.topk.sigma,
                     "n_samples": self.topk.n_samples},
            "beta": {"gamma": self.beta.gamma, "t": self.beta.t},
            "use_projector": self.use_projector,
            "pathfeat_only": self.pathfeat_only,
        }

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(
                deep_dim=obj["deep_dim"], path_dim=obj["path_dim"],
                hidden_dim=obj["hidden_dim"], attn_dim=obj["attn_dim"],
                mixer_layers=obj["mixer_layers"], si_attn_dim=obj["si_attn_dim"],
                topk=topk.TopKConfig(**obj["topk"]),
                beta=si.BetaConfig(**obj["beta"]),
                use_projector=obj["use_projector"],
                pathfeat_only=obj["pathfeat_only"])
        except KeyError as e:
            raise FormatError(f"model config missing {e.args[0]!r}") from None


@dataclass
class ModelOutput:
    y_g: ad.Tensor            # deep-branch bag probability
    y_f: ad.Tensor            # interpretable-branch bag probability
    alpha: ad.Tensor          # patch attention (n,)
    beta: ad.Tensor           # feature attention (d,)
    mil_logits: ad.Tensor     # per-patch deep-branch logits (n,)
    si_logits: ad.Tensor      # per-patch interpretable logits (k,)
    contributions: ad.Tensor  # (k, d) per-patch per-feature terms
    selected: np.ndarray      # hard rank-ordered patch indices (k,)
    padded: bool              # bag had fewer than k patches


def init_params(cfg, rng):
    params = mil.init_mil_params(cfg.mil_config, rng)
    params.update(si.init_si_params(cfg.si_config, rng))
    return params


def forward(params, cfg, deep, path, mode, rng=None):
    """One bag through both branches.

    deep is (n, deep_dim), path is (n, path_dim). mode picks the selection:
    "train" uses the noise-smoothed indicator, "eval" the hard one, and
    "train_barrier" the hard one with the ranking's gradient cut (the
    selection-ablation setting). rng is required only for "train".
    """
    if mode not in MODES:
        raise ad.ContractError(f"unknown mode {mode!r}")
    deep = np.asarray(deep, dtype=np.float64)
    path = np.asarray(path, dtype=np.float64)
    if deep.ndim != 2 or path.ndim != 2 or deep.shape[0] != path.shape[0]:
        raise ad.ShapeError("deep and path must be 2-D with matching rows")

    mil_cfg, si_cfg = cfg.mil_config, cfg.si_config
    mil_in = ad.Tensor(path if cfg.pathfeat_only else deep)
    path_t = ad.Tensor(path)

    embedded = mil.project(params, mil_cfg, mil_in)
    alpha, _ = mil.patch_attention(params, embedded)
    y_g, mil_logits = mil.additive_predict(params, embedded, alpha)

    if mode == "train":
        indicator, padded = topk.perturbed_topk(alpha, cfg.topk, rng=rng)
    else:
        indicator, padded = topk.hard_topk_node(alpha, cfg.topk.k)
    selected, _ = topk.rank_indices(alpha.data, cfg.topk.k)
    m = topk.select_features(indicator, path_t)
    y_f, si_logits, beta, contributions = si.si_forward(params, si_cfg, m)

    return ModelOutput(y_g=y_g, y_f=y_f, alpha=alpha, beta=beta,
                       mil_logits=mil_logits, si_logits=si_logits,
                       contributions=contributions, selected=selected,
                       padded=padded)


def pack_checkpoint(params, cfg, seeds):
    return Checkpoint(params={k: v.data.copy() for k, v in params.items()},
                      config={"model": cfg.to_json()}, seeds=dict(seeds))


def unpack_checkpoint(ckpt):
    cfg = ModelConfig.from_json(ckpt.config["model"])
    ref = init_params(cfg, np.random.default_rng(0))
    if sorted(ref) != sorted(ckpt.params):
        raise FormatError("checkpoint parameters do not match its model config")
    for name, arr in ckpt.params.items():
        if arr.shape != ref[name].data.shape:
            raise FormatError(f"checkpoint parameter {name!r} has shape "
                              f"{arr.shape}, expected {ref[name].data.shape}")
    params = {k: ad.Tensor(v) for k, v in ckpt.params.items()}
    return params, cfg
