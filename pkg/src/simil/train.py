"""Joint training of both branches, ablation switches, k-fold evaluation.

One bag per optimizer step. The interpretable branch is pulled toward the
deep branch by a squared-error term whose teacher side is detached, so the
distillation never steers the deep branch itself.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .featio import FormatError

LR_GRID = (1e-3, 2e-3, 1e-4, 2e-4)
WD_GRID = (1e-2, 5e-3)
ABLATIONS = ("no_pag_topk", "no_kd", "pathfeat_only", "two_stage",
             "no_projector")
PROB_CLAMP = 1e-7


class DataError(ValueError):
    """Dataset cannot support the requested training or split."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-2
    lambda_kd: float = 20.0
    epochs: int = 50
    seed: int = 0
    folds: int = 5
    ablations: tuple = ()
    si_lr: float = None  # optional separate rate for si.* parameters

    def __post_init__(self):
        if self.lr not in LR_GRID:
            raise ValueError(f"lr must be one of {LR_GRID}")
        if self.weight_decay not in WD_GRID:
            raise ValueError(f"weight_decay must be one of {WD_GRID}")
        if self.lambda_kd < 0:
            raise ValueError("lambda_kd must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        object.__setattr__(self, "ablations", tuple(self.ablations))
        for name in self.ablations:
            if name not in ABLATIONS:
                raise ValueError(f"unknown ablation {name!r}")
        if self.si_lr is not None and self.si_lr < 0:
            raise ValueError("si_lr must be >= 0")

    def to_json(self):
        out = dataclasses.asdict(self)
        out["ablations"] = list(self.ablations)
        return out

    @classmethod
    def from_json(cls, obj):
        try:
            kwargs = {f.name: obj[f.name] for f in dataclasses.fields(cls)
                      if f.name in obj}
            return cls(**kwargs)
        except TypeError as e:
            raise FormatError(f"bad train config: {e}") from None


def resolve_model_config(cfg, ablations):
    """Fold the structural ablations into the model configuration."""
    changes = {}
    if "pathfeat_only" in ablations:
        changes["pathfeat_only"] = True
    if "no_projector" in ablations:
        changes["use_projector"] = False
    return dataclasses.replace(cfg, **changes) if changes else cfg


# ---------------------------------------------------------------------------
# loss


def bce(y, p):
    """Binary cross-entropy against a hard label, probability clamped."""
    p = ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if y == 1:
        return ad.mul(ad.log(p), -1.0)
    return ad.mul(ad.log(ad.sub(1.0, p)), -1.0)


def compute_loss(y, y_g, y_f, lam):
    """CE on both branch probabilities plus the detached-teacher pull."""
    loss = ad.add(bce(y, y_g), bce(y, y_f))
    if lam != 0.0:
        gap = ad.sub(y_f, ad.stop_grad(y_g))
        loss = ad.add(loss, ad.mul(ad.mul(gap, gap), lam))
    return loss


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay, one rate override.

    Parameters whose names start with si. use si_lr when it is given; a rate
    of zero freezes that group while the others keep moving."""

    B1, B2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params, lr, weight_decay, si_lr=None):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.si_lr = si_lr
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def rate(self, name):
        if self.si_lr is not None and name.startswith("si."):
            return self.si_lr
        return self.lr

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.B1 ** self.t
        c2 = 1.0 - self.B2 ** self.t
        for name, p in self.params.items():
            lr = self.rate(name)
            if lr == 0.0:
                continue
            g = grads.get(p)
            g = np.zeros_like(p.data) if g is None else g
            self.m[name] = self.B1 * self.m[name] + (1.0 - self.B1) * g
            self.v[name] = self.B2 * self.v[name] + (1.0 - self.B2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.EPS)
            p.data -= lr * (update + self.weight_decay * p.data)


# ---------------------------------------------------------------------------
# metrics


def auc_score(labels, scores):
    """Mann-Whitney statistic: ties between classes count half.

    None when only one class is present."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (pos.size * neg.size))


@dataclass
class EvalResult:
    accuracy: float
    auc: float            # from the interpretable branch; None if one-class
    auc_deep: float
    predictions: list     # per bag: slide_id, label, y_f, y_g

    def to_json(self):
        return dataclasses.asdict(self)


def evaluate(params, cfg, bags):
    """Hard-selection inference over bags; the si-branch probability is the
    reported score."""
    preds = []
    for bag in bags:
        out = model_mod.forward(params, cfg, bag.deep, bag.path, "eval")
        preds.append({"slide_id": bag.slide_id, "label": int(bag.label),
                      "y_f": float(out.y_f.data), "y_g": float(out.y_g.data)})
    labels = np.array([p["label"] for p in preds])
    y_f = np.array([p["y_f"] for p in preds])
    y_g = np.array([p["y_g"] for p in preds])
    accuracy = float(((y_f >= 0.5).astype(int) == labels).mean())
    return EvalResult(accuracy=accuracy, auc=auc_score(labels, y_f),
                      auc_deep=auc_score(labels, y_g), predictions=preds)


# ---------------------------------------------------------------------------
# single-fold training


def _check_two_classes(bags, where, min_per_class=1):
    counts = {0: 0, 1: 0}
    for bag in bags:
        counts[bag.label] += 1
    if min(counts.values()) < min_per_class:
        raise DataError(f"{where} needs at least {min_per_class} bags per "
                        f"class, got {counts}")


def _canonical(bags):
    ordered = sorted(bags, key=lambda b: b.slide_id)
    ids = [b.slide_id for b in ordered]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate slide ids in training set")
    return ordered


def _snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params, snap):
    for k, v in params.items():
        v.data = snap[k].copy()


def _run_epochs(params, cfg, bags, val_bags, opt, train_cfg, loss_fn, mode,
                noise_rng, shuffle_rng, select_on, curve, stage=""):
    """Shared epoch loop: seeded shuffle, per-bag step, best-metric tracking."""
    best = (-np.inf, None)
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(bags))
        losses, si_losses = [], []
        for i in order:
            bag = bags[i]
            out = model_mod.forward(params, cfg, bag.deep, bag.path, mode,
                                    rng=noise_rng)
            loss = loss_fn(bag.label, out)
            grads = ad.backward(loss)
            opt.step(grads)
            losses.append(float(loss.data))
            p = min(max(float(out.y_f.data), PROB_CLAMP), 1.0 - PROB_CLAMP)
            si_losses.append(-np.log(p) if bag.label == 1 else -np.log1p(-p))
        res = evaluate(params, cfg, val_bags)
        metric = select_on(res)
        record = {"stage": stage, "epoch": epoch,
                  "train_loss": float(np.mean(losses)),
                  "train_loss_si": float(np.mean(si_losses)),
                  "val_accuracy": res.accuracy, "val_auc": res.auc,
                  "val_auc_deep": res.auc_deep}
        curve.append(record)
        if metric is not None and metric > best[0]:
            best = (metric, _snapshot(params))
    if best[1] is not None:
        _restore(params, best[1])


def train_fold(train_bags, val_bags, model_cfg, train_cfg):
    """Train on one fold; returns the selected parameters and the epoch log.

    Parameter selection is by best validation AUC of the reported branch
    (deep branch during the first stage of two-stage training); when the
    validation AUC is undefined the final epoch wins."""
    _check_two_classes(train_bags, "training subset", min_per_class=2)
    if not val_bags:
        raise DataError("validation subset is empty")
    bags = _canonical(train_bags)

    cfg = resolve_model_config(model_cfg, train_cfg.ablations)
    seed = np.random.SeedSequence(train_cfg.seed)
    init_rng, noise_seed, shuffle_seed = seed.spawn(3)
    params = model_mod.init_params(cfg, np.random.default_rng(init_rng))
    curve = []

    lam = 0.0 if "no_kd" in train_cfg.ablations else train_cfg.lambda_kd
    mode = "train_barrier" if "no_pag_topk" in train_cfg.ablations else "train"

    if "two_stage" in train_cfg.ablations:
        mil_names = [k for k in params if k.startswith("mil.")]
        si_names = [k for k in params if k.startswith("si.")]
        opt1 = AdamW({k: params[k] for k in mil_names}, train_cfg.lr,
                     train_cfg.weight_decay)
        _run_epochs(params, cfg, bags, val_bags, opt1, train_cfg,
                    lambda y, out: bce(y, out.y_g), "train_barrier",
                    np.random.default_rng(noise_seed),
                    np.random.default_rng(shuffle_seed),
                    lambda r: r.auc_deep, curve, stage="mil")
        opt2 = AdamW({k: params[k] for k in si_names},
                     train_cfg.si_lr if train_cfg.si_lr is not None else train_cfg.lr,
                     train_cfg.weight_decay)
        _run_epochs(params, cfg, bags, val_bags, opt2, train_cfg,
                    lambda y, out: bce(y, out.y_f), "train_barrier",
                    np.random.default_rng(noise_seed),
                    np.random.default_rng(shuffle_seed),
                    lambda r: r.auc, curve, stage="si")
    else:
        opt = AdamW(params, train_cfg.lr, train_cfg.weight_decay,
                    si_lr=train_cfg.si_lr)
        _run_epochs(params, cfg, bags, val_bags, opt, train_cfg,
                    lambda y, out: compute_loss(y, out.y_g, out.y_f, lam),
                    mode, np.random.default_rng(noise_seed),
                    np.random.default_rng(shuffle_seed),
                    lambda r: r.auc, curve)

    ckpt = model_mod.pack_checkpoint(params, cfg, {"train": train_cfg.seed})
    ckpt.config["train"] = train_cfg.to_json()
    return ckpt, curve


# ---------------------------------------------------------------------------
# cross-validation


def stratified_folds(labels, k, rng):
    """Per-class seeded shuffle, then round-robin assignment to k folds."""
    labels = np.asarray(labels)
    fold_of = np.empty(len(labels), dtype=int)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise DataError(f"class {cls} has {idx.size} bags, fewer than "
                            f"{k} folds")
        idx = idx[rng.permutation(idx.size)]
        fold_of[idx] = np.arange(idx.size) % k
    return [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f))
            for f in range(k)]


@dataclass
class CrossValResult:
    folds: list                   # EvalResult per fold, on the shared test set
    mean_auc: float
    std_auc: float
    mean_accuracy: float
    std_accuracy: float
    checkpoints: list = field(repr=False, default_factory=list)
    curves: list = field(repr=False, default_factory=list)

    def to_json(self):
        return {"folds": [r.to_json() for r in self.folds],
                "mean_auc": self.mean_auc, "std_auc": self.std_auc,
                "mean_accuracy": self.mean_accuracy,
                "std_accuracy": self.std_accuracy}


def cross_validate(train_bags, test_bags, model_cfg, train_cfg):
    """Stratified k-fold on the training split; every fold's selected model
    is scored on the one shared test split."""
    bags = _canonical(train_bags)
    _check_two_classes(bags, "training split")
    labels = [bag.label for bag in bags]
    rng = np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 97)))
    results, checkpoints, curves = [], [], []
    for f, (tr, va) in enumerate(stratified_folds(labels, train_cfg.folds, rng)):
        fold_cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + f)
        ckpt, curve = train_fold([bags[i] for i in tr], [bags[i] for i in va],
                                 model_cfg, fold_cfg)
        params, cfg = model_mod.unpack_checkpoint(ckpt)
        results.append(evaluate(params, cfg, test_bags))
        checkpoints.append(ckpt)
        curves.append(curve)
    aucs = [r.auc for r in results]
    accs = [r.accuracy for r in results]
    has_auc = all(a is not None for a in aucs)
    return CrossValResult(
        folds=results,
        mean_auc=float(np.mean(aucs)) if has_auc else None,
        std_auc=float(np.std(aucs)) if has_auc else None,
        mean_accuracy=float(np.mean(accs)),
        std_accuracy=float(np.std(accs)),
        checkpoints=checkpoints, curves=curves)


def gradcheck_full_loss(seed=0, n_patches=6, deep_dim=8, path_dim=12, k=3,
                        lambda_kd=20.0, step=1e-5, tol=1e-4):
    """Finite-difference check of the whole objective on one small instance.

    Selection runs hard (the sampled estimator has no pointwise FD oracle;
    it gets its own common-random-number check) and the distillation target
    is frozen at its current value, which is exactly the gradient the
    detached teacher produces. Mixer output projections are perturbed off
    their zero init so their gradients are exercised too.
    """
    from .topk import TopKConfig

    init_rng, data_rng, wake_rng = [
        np.random.default_rng(s)
        for s in np.random.SeedSequence((seed, 23)).spawn(3)]
    cfg = model_mod.ModelConfig(
        deep_dim=deep_dim, path_dim=path_dim, hidden_dim=16, attn_dim=8,
        mixer_layers=2, si_attn_dim=8,
        topk=TopKConfig(k=k, sigma=0.05, n_samples=8))
    params = model_mod.init_params(cfg, init_rng)
    for name, p in params.items():
        if name.startswith("si.mixer."):
            p.data[...] = wake_rng.normal(size=p.data.shape) * 0.2

    deep = data_rng.normal(size=(n_patches, deep_dim))
    path = data_rng.normal(size=(n_patches, path_dim))
    label = 1
    base = model_mod.forward(params, cfg, deep, path, mode="train_barrier")
    target = float(base.y_g.data)

    def objective(_):
        out = model_mod.forward(params, cfg, deep, path, mode="train_barrier")
        ce = ad.add(bce(label, out.y_g), bce(label, out.y_f))
        gap = ad.sub(out.y_f, target)
        return ad.add(ce, ad.mul(ad.mul(gap, gap), lambda_kd))

    return ad.grad_check(objective, list(params.values()), step=step, tol=tol)
