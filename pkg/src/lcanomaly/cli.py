"""Command-line entry point; every subcommand is a thin shell over one
library operation.

Config precedence is flags > ``--config`` JSON file > built-in defaults;
``--print-config`` emits the resolved config without running. Exit codes:
0 success, 1 pipeline failure (one machine-readable error line on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline as P
from .errors import InvalidArgument, IoError, LcAnomalyError, MalformedInput, StageError
from .features import feature_matrix, read_feature_table, write_feature_table
from .lightcurve import load_manifest

RUN_DIR_ENV = "LCANOMALY_RUN_DIR"
DEFAULT_RUN_DIR = "runs"

# config fields exposed as flags, flag default None = "not supplied"
_CONFIG_FLAGS = {
    "n_trees": (int, "number of trees in the forest"),
    "n_split_features": (int, "features sampled per split; default sqrt of total"),
    "min_node_size": (int, "smallest splittable node"),
    "split_criterion": (str, "impurity measure: gini or entropy"),
    "n_bins": (int, "vote discretization bins"),
    "max_parents": (int, "parent cap per network node"),
    "alpha": (float, "Dirichlet smoothing weight"),
    "order_strategy": (str, "node order: given or entropy"),
    "binning": (str, "bin layout: width or quantile"),
    "map_variant": (str, "CPD estimate: literal or posterior_mode"),
    "top_m": (int, "candidates kept per run (0 keeps all)"),
    "chunk_size": (int, "rows per scoring chunk"),
    "f_max": (float, "period search upper frequency, cycles/day"),
    "oversample": (int, "period grid oversampling factor"),
    "alias_tolerance": (float, "relative tolerance for alias-period removal"),
    "cross_band_depth_fraction": (float, "fraction of the red list kept"),
    "snr_floor": (float, "annotate candidates below this SNR"),
    "min_artifact_group": (int, "smallest usable artifact group"),
    "seed": (int, "RNG seed for the whole run"),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(sp, keys=None):
    defaults = P.PipelineConfig().to_dict()
    for key in (keys or _CONFIG_FLAGS):
        typ, help_text = _CONFIG_FLAGS[key]
        sp.add_argument(_flag(key), dest=key, type=typ, default=None,
                        help=f"{help_text} (default: {defaults[key]})")
    sp.add_argument("--jobs", dest="n_workers", type=int, default=None,
                    help=f"worker parallelism cap (default: {defaults['n_workers']})")
    sp.add_argument("--config", default=None, metavar="FILE",
                    help="JSON file with config keys; flags override it "
                         "(default: none)")
    sp.add_argument("--print-config", action="store_true",
                    help="print the resolved config as JSON and exit "
                         "(default: off)")


def resolve_config(args, base: dict = None) -> P.PipelineConfig:
    base = dict(base) if base else P.PipelineConfig().to_dict()
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise MalformedInput(f"config {config_path} is not JSON: {exc}") from exc
        unknown = set(doc) - set(base)
        if unknown:
            raise InvalidArgument(
                f"unknown config keys in {config_path}: {sorted(unknown)}")
        base.update(doc)
    for key in list(_CONFIG_FLAGS) + ["n_workers"]:
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    return P.PipelineConfig(**base)


def _maybe_print_config(args, cfg: P.PipelineConfig) -> bool:
    if getattr(args, "print_config", False):
        print(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
        return True
    return False


def _run_root(args) -> str:
    return args.run_dir or os.environ.get(RUN_DIR_ENV) or DEFAULT_RUN_DIR


def _add_run_dir(sp):
    sp.add_argument("--run-dir", default=None,
                    help="directory that holds run outputs (default: "
                         f"${RUN_DIR_ENV} or ./{DEFAULT_RUN_DIR})")


def _load_table(args, cfg: P.PipelineConfig):
    if getattr(args, "features", None):
        return read_feature_table(args.features)
    manifest = load_manifest(args.manifest, require_labels=args.require_labels,
                             min_classes=2 if args.require_labels else 1)
    return feature_matrix(manifest, f_max=cfg.f_max, oversample=cfg.oversample,
                          n_workers=cfg.n_workers)


def _require_one_source(args, parser):
    if bool(getattr(args, "features", None)) == bool(getattr(args, "manifest", None)):
        parser.error("exactly one of --features or --manifest is required")


def _classes_from_candidates(path) -> list:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    return [c[2:] for c in header if c.startswith("v_")]


# --------------------------------------------------------------------------
# subcommands


def cmd_extract_features(args, parser) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    manifest = load_manifest(args.manifest, require_labels=args.require_labels,
                             min_classes=2 if args.require_labels else 1)
    table = feature_matrix(manifest, f_max=cfg.f_max,
                           oversample=cfg.oversample, n_workers=cfg.n_workers,
                           duplicate_policy=args.duplicate_policy)
    write_feature_table(table, args.out)
    print(f"extract-features ok n={len(table)} out={args.out}")
    return 0


def cmd_train(args, parser) -> int:
    _require_one_source(args, parser)
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    args.require_labels = True
    table = _load_table(args, cfg)
    run_root = _run_root(args)
    model, report = P.train_from_features(table, cfg, run_dir=run_root)
    out_dir = os.path.join(run_root, model.run_id)
    from .report import render_vote_network, NETWORK_FIG
    render_vote_network(report.class_names, report.structure_parents,
                        os.path.join(out_dir, NETWORK_FIG))
    print(f"train ok run_id={model.run_id} n={report.n_train} "
          f"classes={len(report.class_names)} macro_f={report.macro_f:.4f} "
          f"dir={out_dir}")
    return 0


def cmd_score(args, parser) -> int:
    _require_one_source(args, parser)
    model = P.load_outlier_model(args.model)
    # precedence: flags > --config file > the model bundle's training config
    cfg = resolve_config(args, base=model.config.to_dict())
    if _maybe_print_config(args, cfg):
        return 0
    args.require_labels = False
    table = _load_table(args, cfg)
    run_root = os.path.dirname(os.path.abspath(args.model))
    records = P.score_run(model, table, run_root, cfg)
    out_dir = os.path.join(run_root, model.run_id)
    if args.out:
        P.write_candidates(records, model.class_names, args.out)
    from .report import render_score_distribution, SCORE_FIG
    render_score_distribution(records, os.path.join(out_dir, SCORE_FIG))
    print(f"score ok run_id={model.run_id} scored={len(table)} "
          f"kept={len(records)} dir={out_dir}")
    return 0


def cmd_evaluate_loco(args, parser) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    table = read_feature_table(args.features)
    rep = P.leave_one_class_out(table, args.hold, cfg)
    doc = {
        "held_class": rep.held_class,
        "n_held": rep.n_held,
        "n_total": rep.n_total,
        "held_ranks": rep.held_ranks,
        "macro_f_trained": rep.macro_f_trained,
        "run_id": rep.run_id,
        "fraction_in_top": {str(m): rep.fraction_in_top(m)
                            for m in (args.top_k or [rep.n_held])},
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    from .report import render_rank_curve
    fig_path = os.path.splitext(args.out)[0] + ".png"
    render_rank_curve(rep, fig_path,
                      highlight_top=(args.top_k[0] if args.top_k else None))
    tops = " ".join(f"top{m}={v:.3f}" for m, v in doc["fraction_in_top"].items())
    print(f"evaluate-loco ok run_id={rep.run_id} held={rep.held_class} "
          f"n_held={rep.n_held} {tops} out={args.out}")
    return 0


def cmd_filter(args, parser) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    if not args.alias and not args.cross_band:
        parser.error("nothing to do: pass --alias and/or --cross-band RED_CSV")
    classes = _classes_from_candidates(args.candidates)
    records = P.read_candidates(args.candidates)
    pieces = []
    tally = {}
    if args.alias:
        records, removed, tally = P.alias_filter(records, cfg.alias_tolerance)
        pieces.append(f"alias_removed={len(removed)}")
    if args.cross_band:
        red = P.read_candidates(args.cross_band)
        depth = args.depth if args.depth is not None else None
        records, removed = P.cross_band_filter(
            records, red, depth=depth,
            depth_fraction=cfg.cross_band_depth_fraction)
        pieces.append(f"cross_band_removed={len(removed)}")
    P.write_candidates(records, classes, args.out)
    if tally:
        pieces.append("tally=" + json.dumps(tally, sort_keys=True))
    print(f"filter ok kept={len(records)} {' '.join(pieces)} out={args.out}")
    return 0


def cmd_crossmatch(args, parser) -> int:
    records = P.read_candidates(args.candidates)
    catalog = P.load_catalog(args.catalog)
    res = P.crossmatch(records, catalog, radius_arcsec=args.radius)
    doc = {
        "matches": {oid: {"label": m[0], "separation_arcsec": m[1],
                          "catalog_row": m[2]}
                    for oid, m in sorted(res.matches.items())},
        "unmatched": sorted(res.unmatched),
        "per_label": res.per_label,
        "skipped_rows": res.skipped_rows,
        "radius_arcsec": args.radius,
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"crossmatch ok matched={len(res.matches)} "
          f"unmatched={len(res.unmatched)} skipped={res.skipped_rows} "
          f"out={args.out}")
    return 0


def cmd_cluster(args, parser) -> int:
    records = P.read_candidates(args.candidates)
    res = P.cluster_candidates(records, k_clusters=args.k, seed=args.seed or 0)
    P.write_cmd_export(res, args.out)
    from .report import render_cmd
    render_cmd(res, os.path.splitext(args.out)[0] + ".png")
    sil = "nan" if res.silhouette != res.silhouette else f"{res.silhouette:.3f}"
    print(f"cluster ok k={res.k} silhouette={sil} n={len(records)} "
          f"out={args.out}")
    return 0


def cmd_retrain(args, parser) -> int:
    cfg = resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    table = read_feature_table(args.features)
    entries = P.read_label_log(args.labels)
    groups = P.artifact_groups_from_labels(entries, run_id=args.source_run)
    if args.groups:
        wanted = set(args.groups.split(","))
        missing = wanted - set(groups)
        if missing:
            raise InvalidArgument(
                f"artifact group(s) not in label log: {sorted(missing)}")
        groups = {g: groups[g] for g in sorted(wanted)}
    if not groups:
        raise InvalidArgument("label log contains no artifact groups")
    run_root = _run_root(args)
    model, report = P.retrain_with_artifacts(table, groups, cfg,
                                             run_dir=run_root)
    print(f"retrain ok run_id={model.run_id} groups={len(groups)} "
          f"classes={len(report.class_names)} macro_f={report.macro_f:.4f} "
          f"dir={os.path.join(run_root, model.run_id)}")
    return 0


def cmd_serve(args, parser) -> int:
    from .service import TriageService, create_app
    import uvicorn

    service = TriageService(run_root=_run_root(args),
                            manifest_path=args.manifest,
                            token=args.token)
    app = create_app(service)
    print(f"serve ok runs={len(service.list_runs())} root={service.run_root} "
          f"listening on {args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcanomaly",
        description="Rank photometric time series by anomaly score: a "
                    "random forest votes on each object, a discrete "
                    "network models the vote vectors, and rare vote "
                    "patterns surface as candidates.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sp = sub.add_parser("extract-features",
                        help="compute the feature table for a manifest")
    sp.add_argument("--manifest", required=True,
                    help="training manifest CSV (default: required)")
    sp.add_argument("--out", default="features.csv",
                    help="feature table destination (default: features.csv)")
    sp.add_argument("--duplicate-policy", default="average",
                    choices=("average", "reject"),
                    help="duplicate-epoch handling (default: average)")
    sp.add_argument("--require-labels", action="store_true",
                    help="fail on unlabeled manifest rows (default: off)")
    _add_config_flags(sp, ["f_max", "oversample", "seed"])
    sp.set_defaults(func=cmd_extract_features)

    sp = sub.add_parser("train", help="train forest + vote model into a run")
    sp.add_argument("--manifest", help="labeled manifest CSV (default: none)")
    sp.add_argument("--features",
                    help="precomputed feature table CSV (default: none)")
    _add_run_dir(sp)
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="score objects against a trained run")
    sp.add_argument("--model", required=True,
                    help="path to a trained run directory (default: required)")
    sp.add_argument("--manifest", help="manifest of curves to score "
                                       "(default: none)")
    sp.add_argument("--features", help="feature table to score (default: none)")
    sp.add_argument("--out", default=None,
                    help="also copy candidates.csv here (default: off)")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("evaluate-loco",
                        help="hold one class out, retrain, report its ranks")
    sp.add_argument("--features", required=True,
                    help="feature table CSV (default: required)")
    sp.add_argument("--hold", required=True,
                    help="class name to hold out (default: required)")
    sp.add_argument("--out", default="loco.json",
                    help="rank report destination (default: loco.json)")
    sp.add_argument("--top-k", type=int, nargs="*", default=None,
                    help="list sizes for recovery fractions "
                         "(default: held-class size)")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_evaluate_loco)

    sp = sub.add_parser("filter",
                        help="drop alias-period and single-band candidates")
    sp.add_argument("--candidates", required=True,
                    help="candidate CSV to filter (default: required)")
    sp.add_argument("--out", required=True,
                    help="filtered CSV destination (default: required)")
    sp.add_argument("--alias", action="store_true",
                    help="remove sampling-alias periods (default: off)")
    sp.add_argument("--tolerance", dest="alias_tolerance", type=float,
                    default=None,
                    help="alias relative tolerance (default: "
                         f"{P.PipelineConfig().alias_tolerance})")
    sp.add_argument("--cross-band", default=None, metavar="RED_CSV",
                    help="keep only candidates also in the top of this "
                         "second-band list (default: off)")
    sp.add_argument("--depth", type=float, default=None,
                    help="absolute cross-band depth; inf disables "
                         "(default: fraction of red list)")
    _add_config_flags(sp, ["cross_band_depth_fraction"])
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("crossmatch",
                        help="annotate candidates with catalog counterparts")
    sp.add_argument("--candidates", required=True,
                    help="candidate CSV (default: required)")
    sp.add_argument("--catalog", required=True,
                    help="catalog CSV with ra_deg,dec_deg,label "
                         "(default: required)")
    sp.add_argument("--radius", type=float, required=True,
                    help="match radius in arcsec (default: required)")
    sp.add_argument("--out", default="crossmatch.json",
                    help="match report destination (default: crossmatch.json)")
    sp.set_defaults(func=cmd_crossmatch)

    sp = sub.add_parser("cluster",
                        help="group candidates and export the CMD table")
    sp.add_argument("--candidates", required=True,
                    help="candidate CSV (default: required)")
    sp.add_argument("--k", type=int, default=None,
                    help="fixed cluster count (default: pick by silhouette)")
    sp.add_argument("--seed", type=int, default=None,
                    help="clustering RNG seed (default: 0)")
    sp.add_argument("--out", default="cmd_export.csv",
                    help="CMD table destination (default: cmd_export.csv)")
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("retrain",
                        help="fold labeled artifact groups into new classes")
    sp.add_argument("--features", required=True,
                    help="training feature table CSV (default: required)")
    sp.add_argument("--labels", required=True,
                    help="triage label log, labels.jsonl (default: required)")
    sp.add_argument("--groups", default=None,
                    help="comma-separated group subset (default: all groups)")
    sp.add_argument("--source-run", default=None,
                    help="only use labels from this run id (default: all)")
    _add_run_dir(sp)
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_retrain)

    sp = sub.add_parser("serve", help="HTTP triage service over a run dir")
    _add_run_dir(sp)
    sp.add_argument("--manifest", default=None,
                    help="manifest resolving object ids to curve files "
                         "(default: none)")
    sp.add_argument("--host", default="127.0.0.1",
                    help="bind address (default: 127.0.0.1)")
    sp.add_argument("--port", type=int, default=8787,
                    help="bind port (default: 8787)")
    sp.add_argument("--token", default=None,
                    help="shared auth token; requests must echo it in "
                         "X-Auth-Token (default: auth off)")
    sp.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except StageError as exc:
        print(f"error category=StageError stage={exc.stage}: {exc}",
              file=sys.stderr)
        return 1
    except LcAnomalyError as exc:
        print(f"error category={type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
