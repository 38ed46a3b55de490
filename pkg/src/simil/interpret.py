"""Per-slide contribution reports and cohort-level separability analytics.

The report side decomposes one bag's pre-sigmoid logit into per-patch,
per-feature terms w_j * beta_j * M_ij; the cohort side ranks features by
Jensen-Shannon divergence between class-conditional densities and scores
class separation in a fixed 2D projection.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import silhouette_score
from sklearn.mixture import GaussianMixture

from . import model as model_mod
from .featio import FormatError, write_json
from .normalizer import zscore_fit, zscore_apply
from .train import DataError

JS_BINS = 32
VALUE_BINS = 10
MC_DRAWS = 10_000
LN2 = float(np.log(2.0))
REPORT_VERSION = 1


@dataclass
class Report:
    """One slide's prediction decomposed over the K selected patches."""

    slide_id: str
    prediction: float               # sigmoid of `logit`
    logit: float
    offset: float                   # K * b, the patch-independent part
    padded: bool
    patches: list                   # [{patch_id, row, alpha}] in rank order
    beta: list                      # per-feature gate in (0,1)
    aggregate: list                 # per feature: sum_i w_j beta_j M_ij
    mean: list                      # aggregate / K
    ci_low: list
    ci_high: list
    histograms: list                # per feature: {counts, edges} over M[:, j]
    top_features: list              # [{feature, name, aggregate}] by |aggregate|
    feature_names: list

    def to_json(self):
        out = dataclasses.asdict(self)
        out["report_version"] = REPORT_VERSION
        return out


def patch_feature_report(checkpoint, bag, feature_names=None):
    """Inference with hard selection, then exact credit assignment.

    The aggregate contributions plus the bias offset reproduce the
    pre-sigmoid logit; the 95% interval per feature is mean +- 1.96*sd/sqrt(K)
    with the one-sample sd defined as 0.
    """
    params, cfg = model_mod.unpack_checkpoint(checkpoint)
    out = model_mod.forward(params, cfg, bag.deep, bag.path, mode="eval")

    contrib = out.contributions.data          # (k, d)
    k, d = contrib.shape
    if feature_names is None:
        feature_names = [f"f{j:03d}" for j in range(d)]
    elif len(feature_names) != d:
        raise FormatError(f"expected {d} feature names, got {len(feature_names)}")

    bias = float(params["si.head.b"].data)
    aggregate = contrib.sum(axis=0)
    mean = aggregate / k
    sd = contrib.std(axis=0, ddof=1) if k > 1 else np.zeros(d)
    half = 1.96 * sd / np.sqrt(k)

    rows = bag.path[out.selected]             # original feature values
    hists = []
    for j in range(d):
        counts, edges = np.histogram(rows[:, j], bins=VALUE_BINS)
        hists.append({"counts": counts.tolist(), "edges": edges.tolist()})

    order = np.argsort(-np.abs(aggregate), kind="stable")[:10]
    top = [{"feature": int(j), "name": feature_names[j],
            "aggregate": float(aggregate[j])} for j in order]
    patches = [{"patch_id": bag.patch_ids[i], "row": int(i),
                "alpha": float(out.alpha.data[i])} for i in out.selected]

    return Report(
        slide_id=bag.slide_id,
        prediction=float(out.y_f.data),
        logit=float(aggregate.sum() + k * bias),
        offset=float(k * bias),
        padded=out.padded,
        patches=patches,
        beta=[float(v) for v in out.beta.data],
        aggregate=[float(v) for v in aggregate],
        mean=[float(v) for v in mean],
        ci_low=[float(v) for v in mean - half],
        ci_high=[float(v) for v in mean + half],
        histograms=hists,
        top_features=top,
        feature_names=list(feature_names),
    )


def render_report_svg(report, path=None):
    """Bar chart of the top contributions with per-feature density strips.

    Presentation only; nothing downstream parses this.
    """
    top = report.top_features
    width, row_h, left = 640, 34, 200
    height = row_h * len(top) + 60
    biggest = max((abs(t["aggregate"]) for t in top), default=1.0) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="sans-serif" font-size="12">',
             f'<text x="8" y="20">{report.slide_id}: prediction '
             f'{report.prediction:.3f} (logit {report.logit:.3f}, '
             f'offset {report.offset:.3f})</text>']
    mid = left + (width - left - 20) / 2
    scale = (width - left - 20) / 2 / biggest
    for r, t in enumerate(top):
        y = 40 + r * row_h
        v = t["aggregate"]
        x0 = mid + min(v, 0.0) * scale
        color = "#b2182b" if v > 0 else "#2166ac"
        parts.append(f'<text x="8" y="{y + 14}">{t["name"]}</text>')
        parts.append(f'<rect x="{x0:.1f}" y="{y}" width="{abs(v) * scale:.1f}" '
                     f'height="14" fill="{color}"/>')
        counts = report.histograms[t["feature"]]["counts"]
        peak = max(counts) or 1
        for b, c in enumerate(counts):
            shade = int(240 - 200 * c / peak)
            parts.append(f'<rect x="{left + b * 8}" y="{y + 18}" width="8" '
                         f'height="6" fill="rgb({shade},{shade},{shade})"/>')
    parts.append(f'<line x1="{mid}" y1="36" x2="{mid}" y2="{height - 10}" '
                 f'stroke="#888"/>')
    parts.append("</svg>")
    svg = "\n".join(parts)
    if path is not None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(svg)
    return svg


def write_report(report, json_path, svg_path=None):
    write_json(json_path, report.to_json())
    if svg_path is not None:
        render_report_svg(report, svg_path)


def _check_cohorts(f1, f2, min_rows):
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.ndim != 2 or f2.ndim != 2:
        raise FormatError("cohort inputs must be 2-D row matrices")
    if f1.shape[1] != f2.shape[1]:
        raise FormatError(f"cohort widths differ: {f1.shape[1]} vs {f2.shape[1]}")
    if min(f1.shape[0], f2.shape[0]) < min_rows:
        raise DataError(f"each cohort needs >= {min_rows} rows")
    if not (np.isfinite(f1).all() and np.isfinite(f2).all()):
        raise DataError("cohort values must be finite")
    return f1, f2


def _binned_js(a, b):
    # shared support so the divergence is exactly symmetric
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 0.0
    p, _ = np.histogram(a, bins=JS_BINS, range=(lo, hi))
    q, _ = np.histogram(b, bins=JS_BINS, range=(lo, hi))
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def univariate_separability(f1, f2):
    """Per-feature JS divergence (nats) between the class densities.

    Histograms share the pooled min-max support with 32 bins. Returns
    (js, ranking, curve): raw divergences, feature indices ranked by
    descending JS, and the median JS over the top-n features for n=1..d.
    """
    f1, f2 = _check_cohorts(f1, f2, min_rows=20)
    d = f1.shape[1]
    js = np.array([_binned_js(f1[:, j], f2[:, j]) for j in range(d)])
    ranking = np.argsort(-js, kind="stable")
    ordered = js[ranking]
    curve = np.array([np.median(ordered[:n]) for n in range(1, d + 1)])
    return js, ranking, curve


def _pca_2d(pooled):
    # deterministic orientation: each axis's largest-|loading| entry positive
    centered = pooled - pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    for row in axes:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return centered @ axes.T, axes


def _mixture_logpdf(gmm, x):
    return gmm.score_samples(x)


def _sample_mixture(gmm, n, rng):
    comp = rng.choice(len(gmm.weights_), size=n, p=gmm.weights_)
    out = np.empty((n, gmm.means_.shape[1]))
    for c in range(len(gmm.weights_)):
        rows = comp == c
        if rows.any():
            out[rows] = rng.multivariate_normal(
                gmm.means_[c], gmm.covariances_[c], size=int(rows.sum()))
    return out


def _mixture_js(gp, gq, rng):
    xp = _sample_mixture(gp, MC_DRAWS, rng)
    xq = _sample_mixture(gq, MC_DRAWS, rng)

    def half(x, own, other):
        lo = _mixture_logpdf(own, x)
        lm = np.logaddexp(lo, _mixture_logpdf(other, x)) - np.log(2.0)
        return float(np.mean(lo - lm))

    est = 0.5 * half(xp, gp, gq) + 0.5 * half(xq, gq, gp)
    if not np.isfinite(est):
        raise FloatingPointError("non-finite divergence estimate")
    return min(max(est, 0.0), LN2)  # the true quantity lives in [0, ln 2]


def _fit_gmm(x, n_components, seed):
    gmm = GaussianMixture(n_components=n_components, covariance_type="full",
                          max_iter=100, init_params="k-means++",
                          reg_covar=1e-6, random_state=seed)
    gmm.fit(x)
    if not np.isfinite(gmm.score(x)):
        raise FloatingPointError("degenerate mixture fit")
    return gmm


@dataclass
class CohortStats:
    """Cohort-level separability summary for a pair of classes."""

    js: list                        # per-feature JS, feature order
    ranking: list                   # feature indices, descending JS
    median_curve: list              # median JS over top-n, n = 1..d
    silhouette: float
    jsdiv: dict                     # components i in 1..4 -> JS or None
    projection: list                # pooled 2D coordinates, class-0 rows first
    n_rows: list                    # rows per class

    def to_json(self):
        out = dataclasses.asdict(self)
        out["jsdiv"] = {str(k): v for k, v in self.jsdiv.items()}
        return out


def multivariate_separability(f1, f2, seed=0):
    """Silhouette and mixture-model JS on a shared 2D projection.

    Rows are z-scored over the pooled cohort, projected by PCA with a fixed
    sign convention, and scored with the class labels as clusters. Per class
    a GaussianMixture with i components (i = 1..4) is fit on the projection;
    JS between the two mixtures is estimated by seeded Monte Carlo with 10^4
    draws per side. A degenerate EM fit is retried up to 3 times with a new
    seed, then reported as None.
    """
    f1, f2 = _check_cohorts(f1, f2, min_rows=50)
    pooled = np.vstack([f1, f2])
    mean, std = zscore_fit(pooled)
    coords, _ = _pca_2d(zscore_apply(pooled, mean, std))
    labels = np.r_[np.zeros(len(f1), dtype=int), np.ones(len(f2), dtype=int)]

    x1, x2 = coords[:len(f1)], coords[len(f1):]
    jsdiv = {}
    for i in range(1, 5):
        value = None
        for attempt in range(4):
            s = seed + 1000 * attempt
            try:
                g1 = _fit_gmm(x1, i, s)
                g2 = _fit_gmm(x2, i, s)
                value = _mixture_js(g1, g2, np.random.default_rng(
                    np.random.SeedSequence((seed, i, attempt))))
                break
            except (ValueError, FloatingPointError, np.linalg.LinAlgError):
                continue
        jsdiv[i] = value

    return CohortStats(
        js=[], ranking=[], median_curve=[],
        silhouette=float(silhouette_score(coords, labels)),
        jsdiv=jsdiv,
        projection=coords.tolist(),
        n_rows=[int(len(f1)), int(len(f2))],
    )


def cohort_stats(f1, f2, seed=0):
    """Univariate ranking plus multivariate separation in one record."""
    js, ranking, curve = univariate_separability(f1, f2)
    stats = multivariate_separability(f1, f2, seed=seed)
    stats.js = [float(v) for v in js]
    stats.ranking = [int(v) for v in ranking]
    stats.median_curve = [float(v) for v in curve]
    return stats
