"""Command-line front end for the whole pipeline.

Exit codes: 0 success, 2 usage error, 3 data or format error. Every
randomized subcommand takes --seed and derives all randomness from it;
identical invocations write identical artifacts. Artifact-writing runs also
leave a run manifest naming inputs, the resolved-config hash, and the code
version.
"""

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, features, interpret, model, synthgen, train
from . import featio
from .featio import FormatError, IoError
from .normalizer import DecileNormalizer, FitError
from .si import BetaConfig
from .topk import TopKConfig
from .train import DataError


def _say(msg):
    print(msg)


def _run_manifest_path(out):
    if os.path.isdir(out) or not os.path.splitext(out)[1]:
        return os.path.join(out, "run_manifest.json")
    return out + ".run.json"


def _write_run_manifest(out, command, inputs, config):
    blob = {
        "command": command,
        "inputs": inputs,
        "config_hash": featio.sha256_of(config),
        "code_version": __version__,
    }
    featio.write_json(_run_manifest_path(out), blob)


def _overlay(defaults, file_cfg, flags, where):
    """flags > config file > defaults; unknown config keys are usage errors."""
    out = dict(defaults)
    for key, value in (file_cfg or {}).items():
        if key not in out:
            raise ValueError(f"unknown key {key!r} in config section {where!r}")
        out[key] = value
    for key, value in flags.items():
        if value is not None:
            out[key] = value
    return out


def _load_config_file(path):
    if path is None:
        return {}
    cfg = featio.read_json(path)
    known = {"train", "model", "topk", "beta"}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    return cfg


def _resolve_configs(args, deep_dim, path_dim):
    cfg_file = _load_config_file(args.config)
    tdefaults = {"lr": 2e-4, "weight_decay": 1e-2, "lambda_kd": 20.0,
                 "epochs": 50, "seed": 0, "folds": 5, "ablations": (),
                 "si_lr": None}
    tflags = {"lr": args.lr, "weight_decay": args.weight_decay,
              "lambda_kd": args.lambda_kd, "epochs": args.epochs,
              "seed": args.seed, "folds": args.folds,
              "ablations": tuple(args.ablations.split(","))
              if args.ablations else None, "si_lr": args.si_lr}
    tcfg = train.TrainConfig(**_overlay(tdefaults, cfg_file.get("train"),
                                        tflags, "train"))

    kdefaults = {"k": 20, "sigma": 0.05, "n_samples": 64}
    kflags = {"k": args.k, "sigma": args.sigma, "n_samples": args.n_samples}
    topk_cfg = TopKConfig(**_overlay(kdefaults, cfg_file.get("topk"),
                                     kflags, "topk"))

    bdefaults = {"gamma": 0.75, "t": 3.0}
    bflags = {"gamma": args.gamma, "t": args.temperature}
    beta_cfg = BetaConfig(**_overlay(bdefaults, cfg_file.get("beta"),
                                     bflags, "beta"))

    mdefaults = {"hidden_dim": 128, "attn_dim": 64, "mixer_layers": 4,
                 "si_attn_dim": 64}
    mflags = {"hidden_dim": args.hidden_dim, "attn_dim": args.attn_dim,
              "mixer_layers": args.mixer_layers,
              "si_attn_dim": args.si_attn_dim}
    mcfg = model.ModelConfig(deep_dim=deep_dim, path_dim=path_dim,
                             topk=topk_cfg, beta=beta_cfg,
                             **_overlay(mdefaults, cfg_file.get("model"),
                                        mflags, "model"))
    return mcfg, tcfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_extract(args):
    roots = sorted(d for d in os.listdir(args.bundles)
                   if os.path.isdir(os.path.join(args.bundles, d)))
    roots = [d for d in roots
             if os.path.exists(os.path.join(args.bundles, d, "meta.json"))]
    if not roots:
        raise DataError(f"no patch bundles under {args.bundles}")

    env_cap = int(os.environ.get("SIMIL_THREADS", "0")) or len(roots)
    workers = max(1, min(args.workers or len(roots), env_cap, len(roots)))

    def one(name):
        bundle = featio.read_patch_bundle(os.path.join(args.bundles, name))
        return bundle, features.patch_feature_row(bundle, k=args.knn)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, roots))

    ts = results[0][0].type_set
    for bundle, _ in results:
        if bundle.type_set != ts:
            raise FormatError("bundles disagree on the nucleus type set")
    fm = featio.FeatureMatrix(
        columns=tuple(featio.feature_columns(ts)),
        keys=[(b.slide_id, b.patch_id) for b, _ in results],
        values=np.vstack([row for _, row in results]))
    featio.write_feature_matrix(args.output, fm)
    _write_run_manifest(args.output, "extract",
                        {"bundles": args.bundles, "count": len(roots)},
                        {"knn": args.knn})
    _say(f"extracted {len(roots)} bundles -> {args.output} "
         f"({len(fm.columns)} features, {workers} workers)")
    return 0


def cmd_normalize(args):
    fm = featio.read_feature_matrix(args.features)
    if args.apply:
        norm = DecileNormalizer.from_manifest(featio.read_json(args.apply))
        out = norm.transform_matrix(fm)
        inputs = {"features": args.features, "manifest": args.apply}
    else:
        norm = DecileNormalizer(columns=fm.columns).fit(fm.values)
        out = norm.transform_matrix(fm)
        manifest_path = args.manifest or \
            os.path.splitext(args.output)[0] + ".manifest.json"
        featio.write_json(manifest_path, norm.to_manifest())
        inputs = {"features": args.features}
        _say(f"fitted normalizer manifest -> {manifest_path}")
    featio.write_feature_matrix(args.output, out)
    _write_run_manifest(args.output, "normalize", inputs,
                        {"mode": "apply" if args.apply else "fit"})
    _say(f"normalized {out.values.shape[0]} rows -> {args.output}")
    return 0


def cmd_train(args):
    train_bags, test_bags, manifest = featio.load_bag_dataset(args.data)
    mcfg, tcfg = _resolve_configs(args, manifest["deep_dim"],
                                  manifest["path_dim"])
    result = train.cross_validate(train_bags, test_bags, mcfg, tcfg)

    os.makedirs(args.output, exist_ok=True)
    snapshot = {"model": mcfg.to_json(), "train": tcfg.to_json()}
    featio.write_json(os.path.join(args.output, "config.json"), snapshot)
    metrics = result.to_json()
    metrics["curves"] = result.curves
    featio.write_json(os.path.join(args.output, "metrics.json"), metrics)
    for f, ckpt in enumerate(result.checkpoints):
        featio.save_checkpoint(
            os.path.join(args.output, f"ckpt_fold{f}.json"), ckpt)
    _write_run_manifest(args.output, "train", {"data": args.data}, snapshot)
    auc = "n/a" if result.mean_auc is None else f"{result.mean_auc:.4f}"
    _say(f"cross-validated {tcfg.folds} folds: mean test AUC {auc} "
         f"(accuracy {result.mean_accuracy:.3f}) -> {args.output}")
    return 0


def _load_model(path):
    ckpt = featio.load_checkpoint(path)
    params, cfg = model.unpack_checkpoint(ckpt)
    return ckpt, params, cfg


def _pick_split(args, train_bags, test_bags):
    return train_bags if args.split == "train" else test_bags


def cmd_eval(args):
    _, params, cfg = _load_model(args.checkpoint)
    train_bags, test_bags, _ = featio.load_bag_dataset(args.data)
    bags = _pick_split(args, train_bags, test_bags)
    if not bags:
        raise DataError(f"split {args.split!r} is empty")
    res = train.evaluate(params, cfg, bags)
    featio.write_json(args.output, res.to_json())
    _write_run_manifest(args.output, "eval",
                        {"checkpoint": args.checkpoint, "data": args.data,
                         "split": args.split}, {})
    auc = "n/a" if res.auc is None else f"{res.auc:.4f}"
    _say(f"eval on {len(bags)} {args.split} bags: AUC {auc} "
         f"accuracy {res.accuracy:.3f} -> {args.output}")
    return 0


def cmd_report(args):
    ckpt, _, _ = _load_model(args.checkpoint)
    train_bags, test_bags, manifest = featio.load_bag_dataset(args.data)
    by_id = {b.slide_id: b for b in train_bags + test_bags}
    if args.slide not in by_id:
        raise DataError(f"slide {args.slide!r} not in dataset")
    bag = by_id[args.slide]
    names = manifest.get("columns")
    if names is not None and len(names) != bag.path.shape[1]:
        names = None
    rep = interpret.patch_feature_report(ckpt, bag, names)
    interpret.write_report(rep, args.output, args.svg)
    _write_run_manifest(args.output, "report",
                        {"checkpoint": args.checkpoint, "data": args.data,
                         "slide": args.slide}, {})
    _say(f"report for {args.slide}: prediction {rep.prediction:.4f}, "
         f"top feature {rep.top_features[0]['name']} -> {args.output}")
    return 0


def cmd_cohort(args):
    train_bags, test_bags, _ = featio.load_bag_dataset(args.data)
    bags = _pick_split(args, train_bags, test_bags)
    if args.checkpoint:
        _, params, cfg = _load_model(args.checkpoint)
        rows = {0: [], 1: []}
        for bag in bags:
            out = model.forward(params, cfg, bag.deep, bag.path, mode="eval")
            rows[bag.label].append(bag.path[out.selected])
    else:
        rows = {0: [], 1: []}
        for bag in bags:
            rows[bag.label].append(bag.path)
    if not rows[0] or not rows[1]:
        raise DataError("cohort analytics need both classes in the split")
    f0 = np.vstack(rows[0])
    f1 = np.vstack(rows[1])
    stats = interpret.cohort_stats(f0, f1, seed=args.seed)
    featio.write_json(args.output, stats.to_json())
    _write_run_manifest(args.output, "cohort",
                        {"data": args.data, "split": args.split,
                         "checkpoint": args.checkpoint},
                        {"seed": args.seed})
    top = ", ".join(str(j) for j in stats.ranking[:10])
    _say(f"cohort of {len(f0)}+{len(f1)} rows: silhouette "
         f"{stats.silhouette:.3f}, top features by JS: {top} -> {args.output}")
    return 0


def _parse_float_list(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") \
            from None


def cmd_synth_bags(args):
    cfg = synthgen.BagGenConfig(
        bags_per_class=args.bags_per_class,
        test_bags_per_class=args.test_bags_per_class,
        n_range=(args.n_min, args.n_max), deep_dim=args.deep_dim,
        path_dim=args.path_dim, salient_fraction=args.salient_fraction,
        planted=tuple(int(v) for v in _parse_float_list(args.planted)),
        delta=args.delta, deep_shift=args.deep_shift,
        noise_scale=args.noise_scale, seed=args.seed)
    train_bags, test_bags, truth = synthgen.gen_bags(cfg)
    featio.save_bag_dataset(args.output, train_bags, test_bags,
                            extra={"generator": "planted_bags"})
    featio.write_json(os.path.join(args.output, "truth.json"), truth)
    _write_run_manifest(args.output, "synth bags", {},
                        dataclasses.asdict(cfg))
    _say(f"wrote {len(train_bags)} train + {len(test_bags)} test bags "
         f"-> {args.output}")
    return 0


def cmd_synth_nuclei(args):
    proportions = _parse_float_list(args.proportions)
    intensities = tuple(int(v) for v in _parse_float_list(args.type_intensity))
    axis = _parse_float_list(args.axis_range)
    aspect = _parse_float_list(args.aspect_range)
    if len(axis) != 2 or len(aspect) != 2:
        raise ValueError("--axis-range and --aspect-range take two numbers")
    for i in range(args.count):
        cfg = synthgen.NucleiGenConfig(
            process=args.process, intensity=args.intensity,
            parent_intensity=args.parent_intensity,
            cluster_std=args.cluster_std, type_proportions=proportions,
            segregate_types=args.segregate, axis_range=axis,
            aspect_range=aspect, type_intensity=intensities,
            background_intensity=args.background,
            pixel_noise=args.pixel_noise, patch_size=args.patch_size,
            seed=args.seed + i)
        bundle, truth = synthgen.gen_nuclei_patch(cfg)
        sub = os.path.join(args.output, f"bundle_{i:03d}")
        featio.write_patch_bundle(sub, bundle)
        featio.write_json(os.path.join(sub, "truth.json"), truth)
    _write_run_manifest(args.output, "synth nuclei",
                        {}, {"count": args.count, "seed": args.seed,
                             "process": args.process})
    _say(f"wrote {args.count} nuclei bundles -> {args.output}")
    return 0


def cmd_gradcheck(args):
    report = train.gradcheck_full_loss(
        seed=args.seed, n_patches=args.n_patches, deep_dim=args.deep_dim,
        path_dim=args.path_dim, k=args.k_patches, tol=args.tol)
    _say(str(report))
    if args.output:
        featio.write_json(args.output, {
            "passed": bool(report.passed),
            "max_rel_err": float(report.max_rel_err),
            "n_coords": int(report.n_coords),
            "failures": [[int(pi), int(ci), msg]
                         for pi, ci, msg in report.failures],
        })
        _write_run_manifest(args.output, "gradcheck", {},
                            {"seed": args.seed, "tol": args.tol})
    return 0 if report.passed else 3


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file with train/model/"
                   "topk/beta sections; flags override it")
    p.add_argument("--lr", type=float,
                   help="learning rate, one of 1e-3 2e-3 1e-4 2e-4 "
                   "(default: 2e-4)")
    p.add_argument("--weight-decay", type=float,
                   help="decoupled weight decay, one of 1e-2 5e-3 "
                   "(default: 1e-2)")
    p.add_argument("--lambda-kd", type=float,
                   help="distillation weight (default: 20.0)")
    p.add_argument("--epochs", type=int, help="epochs per fold (default: 50)")
    p.add_argument("--folds", type=int,
                   help="cross-validation folds (default: 5)")
    p.add_argument("--si-lr", type=float,
                   help="separate learning rate for the interpretable branch "
                   "(default: use --lr)")
    p.add_argument("--ablations",
                   help="comma list from: no_pag_topk no_kd pathfeat_only "
                   "two_stage no_projector (default: none)")
    p.add_argument("--k", type=int,
                   help="patches selected per bag (default: 20)")
    p.add_argument("--sigma", type=float,
                   help="selection perturbation scale (default: 0.05)")
    p.add_argument("--n-samples", type=int,
                   help="perturbation samples (default: 64)")
    p.add_argument("--gamma", type=float,
                   help="feature-gate percentile (default: 0.75)")
    p.add_argument("--temperature", type=float,
                   help="feature-gate temperature (default: 3.0)")
    p.add_argument("--hidden-dim", type=int,
                   help="deep-branch embedding width (default: 128)")
    p.add_argument("--attn-dim", type=int,
                   help="deep-branch attention width (default: 64)")
    p.add_argument("--mixer-layers", type=int,
                   help="context-mixer depth (default: 4)")
    p.add_argument("--si-attn-dim", type=int,
                   help="feature-attention width (default: 64)")
    p.add_argument("--seed", type=int, default=0,
                   help="master seed for init/noise/shuffles (default: 0)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="simil",
        description="Self-interpretable MIL: features, training, reports.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="handcrafted features from bundles")
    p.add_argument("--bundles", required=True,
                   help="directory of patch-bundle subdirectories")
    p.add_argument("-o", "--output", required=True, help="feature CSV path")
    p.add_argument("--knn", type=int, default=6,
                   help="cell-graph neighbor count (default: 6)")
    p.add_argument("--workers", type=int,
                   help="worker threads; SIMIL_THREADS caps this "
                   "(default: one per bundle)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("normalize", help="decile-normalize a feature CSV")
    p.add_argument("--features", required=True, help="input feature CSV")
    p.add_argument("-o", "--output", required=True, help="normalized CSV path")
    p.add_argument("--manifest",
                   help="where to write the fitted manifest "
                   "(default: <output>.manifest.json)")
    p.add_argument("--apply", metavar="MANIFEST",
                   help="apply an existing manifest instead of fitting")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("train", help="cross-validated co-learned training")
    p.add_argument("--data", required=True, help="bag dataset directory")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="bag dataset directory")
    p.add_argument("--split", choices=("train", "test"), default="test",
                   help="which split to score (default: test)")
    p.add_argument("-o", "--output", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="per-slide contribution report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="bag dataset directory")
    p.add_argument("--slide", required=True, help="slide id to explain")
    p.add_argument("-o", "--output", required=True, help="report JSON path")
    p.add_argument("--svg", help="also render an SVG chart here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cohort", help="class-separability analytics")
    p.add_argument("--data", required=True, help="bag dataset directory")
    p.add_argument("--split", choices=("train", "test"), default="test",
                   help="which split to analyze (default: test)")
    p.add_argument("--checkpoint",
                   help="restrict rows to each bag's selected patches")
    p.add_argument("-o", "--output", required=True, help="stats JSON path")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for mixture fits and sampling (default: 0)")
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("synth", help="seeded synthetic data")
    ssub = p.add_subparsers(dest="what", required=True)

    b = ssub.add_parser("bags", help="planted-signal bag dataset")
    b.add_argument("-o", "--output", required=True, help="dataset directory")
    b.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    b.add_argument("--bags-per-class", type=int, default=200,
                   help="train bags per class (default: 200)")
    b.add_argument("--test-bags-per-class", type=int, default=50,
                   help="test bags per class (default: 50)")
    b.add_argument("--n-min", type=int, default=30,
                   help="min patches per bag (default: 30)")
    b.add_argument("--n-max", type=int, default=60,
                   help="max patches per bag (default: 60)")
    b.add_argument("--deep-dim", type=int, default=24,
                   help="deep feature width (default: 24)")
    b.add_argument("--path-dim", type=int, default=32,
                   help="handcrafted feature width (default: 32)")
    b.add_argument("--salient-fraction", type=float, default=0.5,
                   help="fraction of salient patches in class 1 "
                   "(default: 0.5)")
    b.add_argument("--planted", default="3,9,15,21,27",
                   help="comma list of shifted feature indices "
                   "(default: 3,9,15,21,27)")
    b.add_argument("--delta", type=float, default=1.5,
                   help="planted feature shift (default: 1.5)")
    b.add_argument("--deep-shift", type=float, default=2.0,
                   help="deep-feature shift magnitude (default: 2.0)")
    b.add_argument("--noise-scale", type=float, default=1.0,
                   help="background noise scale (default: 1.0)")
    b.set_defaults(func=cmd_synth_bags)

    n = ssub.add_parser("nuclei", help="point-process nuclei bundles")
    n.add_argument("-o", "--output", required=True, help="output directory")
    n.add_argument("--seed", type=int, default=0,
                   help="seed of the first bundle (default: 0)")
    n.add_argument("--count", type=int, default=1,
                   help="bundles to write, seeds seed..seed+count-1 "
                   "(default: 1)")
    n.add_argument("--process", choices=("poisson", "thomas"),
                   default="poisson", help="point process (default: poisson)")
    n.add_argument("--intensity", type=float, default=2000.0,
                   help="expected nuclei per patch (default: 2000)")
    n.add_argument("--parent-intensity", type=float, default=20.0,
                   help="thomas: expected cluster count (default: 20)")
    n.add_argument("--cluster-std", type=float, default=60.0,
                   help="thomas: scatter around parents (default: 60)")
    n.add_argument("--proportions", default="1.0",
                   help="comma list of type proportions (default: 1.0)")
    n.add_argument("--type-intensity", default="90",
                   help="comma list of per-type pixel means (default: 90)")
    n.add_argument("--segregate", action="store_true",
                   help="thomas: one type per cluster (default: off)")
    n.add_argument("--axis-range", default="4,8",
                   help="semi-major axis range in px (default: 4,8)")
    n.add_argument("--aspect-range", default="1,2",
                   help="major/minor ratio range (default: 1,2)")
    n.add_argument("--background", type=int, default=210,
                   help="background pixel mean (default: 210)")
    n.add_argument("--pixel-noise", type=float, default=8.0,
                   help="pixel noise std (default: 8)")
    n.add_argument("--patch-size", type=int, default=1792,
                   help="patch side in px (default: 1792)")
    n.set_defaults(func=cmd_synth_nuclei)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full objective")
    p.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    p.add_argument("--n-patches", type=int, default=6,
                   help="bag size (default: 6)")
    p.add_argument("--deep-dim", type=int, default=8,
                   help="deep width (default: 8)")
    p.add_argument("--path-dim", type=int, default=12,
                   help="handcrafted width (default: 12)")
    p.add_argument("--k-patches", type=int, default=3,
                   help="selection size (default: 3)")
    p.add_argument("--tol", type=float, default=1e-4,
                   help="max relative error allowed (default: 1e-4)")
    p.add_argument("-o", "--output", help="also write the result as JSON")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (FormatError, DataError, FitError, IoError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
