"""Seeded synthetic data: planted-signal bags and point-process nuclei.

Two generators with recorded ground truth. Bags carry a known set of shifted
feature columns in a known subset of patches, so retrieval and AUC claims
have an oracle. Nuclei patches realize known point processes, so the spatial
statistics have one too.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .featio import Bag, NucleusTypeSet, PatchBundle

BASE_PATCH = 1792


@dataclass(frozen=True)
class BagGenConfig:
    bags_per_class: int = 200
    test_bags_per_class: int = 50
    n_range: tuple = (30, 60)
    deep_dim: int = 24
    path_dim: int = 32
    salient_fraction: float = 0.5
    planted: tuple = (3, 9, 15, 21, 27)
    delta: float = 1.5             # shift applied to planted feature columns
    deep_shift: float = 2.0        # shift along a fixed random deep direction
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.bags_per_class < 1 or self.test_bags_per_class < 0:
            raise ValueError("bag counts must be positive")
        if not (1 <= self.n_range[0] <= self.n_range[1]):
            raise ValueError("bad patch-count range")
        if not 0.0 < self.salient_fraction <= 1.0:
            raise ValueError("salient_fraction must be in (0, 1]")
        planted = tuple(sorted(int(j) for j in self.planted))
        if len(set(planted)) != len(planted) or not planted:
            raise ValueError("planted indices must be unique and non-empty")
        if planted[0] < 0 or planted[-1] >= self.path_dim:
            raise ValueError("planted indices must lie in [0, path_dim)")
        object.__setattr__(self, "planted", planted)
        object.__setattr__(self, "n_range",
                           (int(self.n_range[0]), int(self.n_range[1])))


def gen_bags(cfg):
    """Labeled train/test bags plus a truth sidecar.

    Class-1 bags get ceil(salient_fraction * n) salient patches: their
    planted path columns shift by delta and their deep rows move along one
    fixed unit direction. Everything else is standard normal noise, so the
    emitted path features are already on z-score scale.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    direction = rng.standard_normal(cfg.deep_dim)
    direction /= np.linalg.norm(direction)

    salient_map = {}

    def make(split, label, index):
        n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
        path = rng.standard_normal((n, cfg.path_dim)) * cfg.noise_scale
        deep = rng.standard_normal((n, cfg.deep_dim)) * cfg.noise_scale
        slide_id = f"{split}_c{label}_{index:03d}"
        salient = []
        if label == 1:
            n_sal = int(np.ceil(cfg.salient_fraction * n))
            salient = sorted(rng.permutation(n)[:n_sal].tolist())
            path[np.ix_(salient, cfg.planted)] += cfg.delta
            deep[salient] += cfg.deep_shift * direction
        salient_map[slide_id] = salient
        return Bag(slide_id=slide_id, label=label, deep=deep, path=path)

    train = [make("train", label, i)
             for i in range(cfg.bags_per_class) for label in (0, 1)]
    test = [make("test", label, i)
            for i in range(cfg.test_bags_per_class) for label in (0, 1)]
    truth = {
        "planted_features": list(cfg.planted),
        "deep_direction": [float(v) for v in direction],
        "salient_patches": salient_map,
        "config": dataclasses.asdict(cfg),
    }
    return train, test, truth


@dataclass(frozen=True)
class NucleiGenConfig:
    process: str = "poisson"            # or "thomas"
    intensity: float = 2000.0           # expected nuclei per patch
    parent_intensity: float = 20.0      # thomas: expected cluster count
    cluster_std: float = 60.0           # thomas: Gaussian scatter around parent
    type_proportions: tuple = (1.0,)
    segregate_types: bool = False       # thomas: one type per cluster
    axis_range: tuple = (4.0, 8.0)      # semi-major axis, pixels
    aspect_range: tuple = (1.0, 2.0)    # major/minor ratio
    type_intensity: tuple = (90,)       # mean pixel value per type
    background_intensity: int = 210
    pixel_noise: float = 8.0
    patch_size: int = BASE_PATCH
    seed: int = 0

    def __post_init__(self):
        if self.process not in ("poisson", "thomas"):
            raise ValueError("process must be poisson or thomas")
        if abs(sum(self.type_proportions) - 1.0) > 1e-9:
            raise ValueError("type proportions must sum to 1")
        if len(self.type_intensity) != len(self.type_proportions):
            raise ValueError("need one pixel intensity per type")
        if not (0 < self.axis_range[0] <= self.axis_range[1]):
            raise ValueError("bad axis range")
        if not (1.0 <= self.aspect_range[0] <= self.aspect_range[1]):
            raise ValueError("aspect ratios must be >= 1")
        if self.patch_size < 8:
            raise ValueError("patch too small")

    @property
    def n_types(self):
        return len(self.type_proportions)


def _sample_centers(cfg, rng):
    """Point locations plus, for thomas, each point's parent index."""
    size = float(cfg.patch_size)
    if cfg.process == "poisson":
        n = rng.poisson(cfg.intensity)
        return rng.uniform(0.0, size, size=(n, 2)), np.zeros(n, dtype=int)
    n_parents = max(1, rng.poisson(cfg.parent_intensity))
    parents = rng.uniform(0.0, size, size=(n_parents, 2))
    per_cluster = cfg.intensity / n_parents
    points, owner = [], []
    for pi, parent in enumerate(parents):
        for _ in range(rng.poisson(per_cluster)):
            points.append(parent + rng.normal(0.0, cfg.cluster_std, size=2))
            owner.append(pi)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    keep = np.all((pts >= 0.0) & (pts < size), axis=1)
    return pts[keep], np.asarray(owner, dtype=int)[keep]


def _assign_types(cfg, rng, owners):
    props = np.asarray(cfg.type_proportions)
    if cfg.segregate_types and cfg.process == "thomas":
        n_parents = owners.max() + 1 if owners.size else 0
        per_parent = rng.choice(cfg.n_types, size=n_parents, p=props)
        return per_parent[owners]
    return rng.choice(cfg.n_types, size=owners.shape[0], p=props)


def gen_nuclei_patch(cfg, type_set=None):
    """Rasterize one synthetic patch; returns (bundle, truth).

    Nuclei are filled ellipses drawn in id order, so a later nucleus paints
    over an earlier one where they overlap; fully painted-over ids vanish
    from the bundle but stay in the truth record.
    """
    if type_set is None:
        # type sets carry at least two names; a single-type process simply
        # leaves the extra one unpopulated
        names = tuple(f"type_{i}" for i in range(max(cfg.n_types, 2)))
        type_set = NucleusTypeSet(names)
    if type_set.c < cfg.n_types:
        raise ValueError("type set smaller than type proportions")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    size = cfg.patch_size
    centers, owners = _sample_centers(cfg, rng)
    types = _assign_types(cfg, rng, owners)
    n = centers.shape[0]

    major = rng.uniform(cfg.axis_range[0], cfg.axis_range[1], size=n)
    minor = major / rng.uniform(cfg.aspect_range[0], cfg.aspect_range[1], size=n)
    theta = rng.uniform(-np.pi / 2.0, np.pi / 2.0, size=n)

    instances = np.zeros((size, size), dtype=np.uint16)
    for i in range(n):
        cx, cy = centers[i]
        r = major[i]
        x0, x1 = int(max(0, np.floor(cx - r))), int(min(size - 1, np.ceil(cx + r)))
        y0, y1 = int(max(0, np.floor(cy - r))), int(min(size - 1, np.ceil(cy + r)))
        if x0 > x1 or y0 > y1:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
        c, s = np.cos(theta[i]), np.sin(theta[i])
        u = (dx * c + dy * s) / major[i]
        v = (-dx * s + dy * c) / minor[i]
        inside = u * u + v * v <= 1.0
        instances[ys[inside], xs[inside]] = i + 1

    noise = rng.normal(0.0, cfg.pixel_noise, size=(size, size))
    intensity = np.full((size, size), float(cfg.background_intensity))
    for t in range(cfg.n_types):
        mask = np.isin(instances, np.flatnonzero(types == t) + 1)
        intensity[mask] = cfg.type_intensity[t]
    intensity = np.clip(intensity + noise, 0, 255).astype(np.uint8)

    surviving = set(np.unique(instances).tolist()) - {0}
    bundle = PatchBundle(
        intensity=intensity, instances=instances,
        types={iid: int(types[iid - 1]) for iid in sorted(surviving)},
        slide_id="synthetic", patch_id=f"seed{cfg.seed}",
        type_set=type_set).validate()
    truth = {
        "centers": centers.tolist(),
        "types": types.tolist(),
        "owners": owners.tolist(),
        "surviving_ids": sorted(surviving),
        "config": dataclasses.asdict(cfg),
    }
    return bundle, truth
