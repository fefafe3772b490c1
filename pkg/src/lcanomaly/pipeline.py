"""End-to-end orchestration: train, score, rank, filter, validate, retrain.

A *run* is an immutable directory named by a deterministic run id (hash of
the training-data fingerprint, the config, and the seed). It contains the
forest bundle, the vote-model bundle, the training feature table, the
ranked candidate list, and a report; repeated runs with identical inputs
produce byte-identical artifacts (wall-clock timings live in a separate
diagnostics file so the deterministic set stays clean).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InvalidArgument, IoError, LcAnomalyError, MalformedInput, StageError
from .features import (
    FEATURE_NAMES,
    N_FEATURES,
    FeatureTable,
    feature_matrix,
    write_feature_table,
)
from .forest import (
    Forest,
    ForestConfig,
    encode_labels,
    load_forest,
    macro_f_score,
    predict_matrix,
    save_forest,
    train_forest,
)
from .lightcurve import TrainingManifest
from .votemodel import (
    VoteModel,
    fit_vote_model,
    joint_log_probability_matrix,
    load_vote_model,
    save_vote_model,
)

SIDEREAL_DAY = 0.99727  # in solar days
SOLAR_DAY = 1.0
YEAR_DAYS = 365.25
ALIAS_HARMONICS = (1.0 / 3.0, 0.5, 1.0, 2.0, 3.0)

MODEL_META_NAME = "model_meta.json"
FOREST_NAME = "forest.model"
VOTEMODEL_NAME = "votemodel.json"
CANDIDATES_NAME = "candidates.csv"
FEATURES_NAME = "features.csv"
REPORT_NAME = "report.json"
TIMING_NAME = "timing.json"
LABELS_NAME = "labels.jsonl"


@dataclass
class PipelineConfig:
    """Hyperparameters for a full run; defaults follow the method's
    published operating point (500 trees, sqrt feature sampling, 20 bins,
    2 parents, alpha 4)."""

    n_trees: int = 500
    n_split_features: int | None = None
    min_node_size: int = 1
    split_criterion: str = "gini"
    n_bins: int = 20
    max_parents: int = 2
    alpha: float = 4.0
    order_strategy: str = "given"
    binning: str = "width"
    map_variant: str = "literal"
    top_m: int = 4000
    chunk_size: int = 8192
    n_workers: int = 1
    f_max: float = 10.0
    oversample: int = 5
    alias_tolerance: float = 0.01
    cross_band_depth_fraction: float = 0.001
    snr_floor: float = 5.0
    min_artifact_group: int = 5
    seed: int = 0

    def forest_config(self) -> ForestConfig:
        return ForestConfig(
            n_trees=self.n_trees,
            n_split_features=self.n_split_features,
            min_node_size=self.min_node_size,
            rng_seed=self.seed,
            split_criterion=self.split_criterion,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OutlierModel:
    """Trained forest + vote model + the data they came from."""

    forest: Forest
    vote_model: VoteModel
    medians: np.ndarray            # feature imputation medians from training
    fingerprint: str               # training feature-table digest
    config: PipelineConfig
    run_id: str

    def __post_init__(self):
        if list(self.forest.class_names) != list(self.vote_model.class_names):
            raise InvalidArgument(
                "forest and vote model class lists differ: "
                f"{self.forest.class_names} vs {self.vote_model.class_names}")

    @property
    def class_names(self) -> list:
        return list(self.forest.class_names)


@dataclass
class CandidateRecord:
    object_id: str
    score: float
    rank: int
    votes: np.ndarray
    features: np.ndarray
    mask_bits: int
    period: float               # NaN when the period feature is invalid
    band: str = "blue"
    triage_label: str = "unreviewed"
    run_id: str = ""
    ra: float = float("nan")
    dec: float = float("nan")
    mean_mag: float = float("nan")
    snr: float = float("nan")
    annotations: list = field(default_factory=list)

    @property
    def period_valid(self) -> bool:
        return bool(np.isfinite(self.period))


@dataclass
class RunReport:
    run_id: str
    config: dict
    n_train: int
    class_names: list
    class_counts: dict
    oob_confusion: list            # k x k, rows = true class
    macro_f: float
    oob_mean_coverage: float
    zero_coverage_count: int
    structure_order: list
    structure_parents: list
    candidate_count: int = 0
    filter_tallies: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)  # diagnostics; not in report.json

    def to_dict(self) -> dict:
        doc = {k: v for k, v in self.__dict__.items() if k != "timing"}
        return doc


def table_fingerprint(table: FeatureTable) -> str:
    h = hashlib.sha256()
    h.update("\x1f".join(table.ids).encode())
    h.update("\x1f".join(table.labels).encode())
    h.update(np.ascontiguousarray(table.X).tobytes())
    h.update(np.ascontiguousarray(table.mask).tobytes())
    return h.hexdigest()


# Execution knobs that cannot change results (verified by the worker/chunk
# invariance tests) stay out of the run identity.
_EXECUTION_ONLY_FIELDS = ("n_workers", "chunk_size")


def derive_run_id(fingerprint: str, config: PipelineConfig) -> str:
    payload = {k: v for k, v in config.to_dict().items()
               if k not in _EXECUTION_ONLY_FIELDS}
    h = hashlib.sha256()
    h.update(fingerprint.encode())
    h.update(json.dumps(payload, sort_keys=True).encode())
    return "run-" + h.hexdigest()[:12]


def _confusion(votes, y, k):
    preds = np.argmax(votes, axis=1)
    cm = np.zeros((k, k), dtype=int)
    for t, p in zip(y, preds):
        cm[t, p] += 1
    return cm


class _StageTimer:
    def __init__(self, report_timing: dict):
        self.timing = report_timing

    def run(self, stage: str, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except StageError:
            raise
        except LcAnomalyError as exc:
            raise StageError(stage, str(exc)) from exc
        except Exception as exc:  # noqa: BLE001 - report the stage context
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        self.timing[stage] = time.perf_counter() - t0
        return out


def train_from_features(table: FeatureTable, cfg: PipelineConfig = None,
                        run_dir=None) -> tuple:
    """Train forest + vote model on an extracted feature table.

    Returns (OutlierModel, RunReport). When ``run_dir`` is given the run
    artifacts are persisted under ``run_dir/<run_id>/``; partial artifacts
    from completed stages are retained if a later stage fails.
    """
    cfg = cfg or PipelineConfig()
    if table.medians is None:
        table.impute()
    fingerprint = table_fingerprint(table)
    run_id = derive_run_id(fingerprint, cfg)
    timing: dict = {}
    timer = _StageTimer(timing)
    out_dir = None
    if run_dir is not None:
        out_dir = os.path.join(str(run_dir), run_id)
        os.makedirs(out_dir, exist_ok=True)
        timer.run("persist_features",
                  lambda: write_feature_table(table, os.path.join(out_dir, FEATURES_NAME)))

    if len(set(table.labels)) < 2:
        raise StageError("forest", "training needs at least 2 classes")

    def _forest():
        return train_forest(table.X_imputed, table.labels, cfg.forest_config())

    forest = timer.run("forest", _forest)
    if out_dir:
        timer.run("persist_forest",
                  lambda: save_forest(forest, os.path.join(out_dir, FOREST_NAME)))

    def _votemodel():
        return fit_vote_model(
            forest.oob_votes, forest.class_names, n_bins=cfg.n_bins,
            max_parents=cfg.max_parents, alpha=cfg.alpha,
            order_strategy=cfg.order_strategy, binning=cfg.binning,
            map_variant=cfg.map_variant)

    vote_model = timer.run("votemodel", _votemodel)
    if out_dir:
        timer.run("persist_votemodel",
                  lambda: save_vote_model(vote_model, os.path.join(out_dir, VOTEMODEL_NAME)))

    model = OutlierModel(forest=forest, vote_model=vote_model,
                         medians=table.medians, fingerprint=fingerprint,
                         config=cfg, run_id=run_id)

    y, _ = encode_labels(table.labels, forest.class_names)
    k = len(forest.class_names)
    counts = {c: int(np.sum(y == j)) for j, c in enumerate(forest.class_names)}
    report = RunReport(
        run_id=run_id,
        config=cfg.to_dict(),
        n_train=len(table),
        class_names=list(forest.class_names),
        class_counts=counts,
        oob_confusion=_confusion(forest.oob_votes, y, k).tolist(),
        macro_f=macro_f_score(forest.oob_votes, y),
        oob_mean_coverage=float(forest.oob_coverage.mean()),
        zero_coverage_count=int(len(forest.oob_imputed)),
        structure_order=[int(x) for x in vote_model.structure.order],
        structure_parents=[list(map(int, p)) for p in vote_model.structure.parents],
        warnings=list(table.warnings),
        timing=timing,
    )
    if out_dir:
        timer.run("persist_model_meta", lambda: _save_model_meta(model, out_dir))
        write_report(report, out_dir)
    return model, report


def train(manifest: TrainingManifest, cfg: PipelineConfig = None, run_dir=None):
    """Extract features from manifest curves, then train."""
    cfg = cfg or PipelineConfig()
    timing: dict = {}
    timer = _StageTimer(timing)
    table = timer.run("features", lambda: feature_matrix(
        manifest, f_max=cfg.f_max, oversample=cfg.oversample,
        n_workers=cfg.n_workers))
    model, report = train_from_features(table, cfg, run_dir=run_dir)
    report.timing.update(timing)
    return model, report


def _save_model_meta(model: OutlierModel, out_dir) -> None:
    doc = {
        "format_version": 1,
        "kind": "outlier_model",
        "run_id": model.run_id,
        "fingerprint": model.fingerprint,
        "config": model.config.to_dict(),
        "medians": [float(m) for m in model.medians],
        "class_names": model.class_names,
    }
    with open(os.path.join(out_dir, MODEL_META_NAME), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_outlier_model(run_path) -> OutlierModel:
    """Load a persisted run directory back into an OutlierModel."""
    meta_path = os.path.join(str(run_path), MODEL_META_NAME)
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read model bundle {meta_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"corrupt model bundle {meta_path}: {exc}") from exc
    forest = load_forest(os.path.join(str(run_path), FOREST_NAME))
    vote_model = load_vote_model(os.path.join(str(run_path), VOTEMODEL_NAME))
    return OutlierModel(
        forest=forest,
        vote_model=vote_model,
        medians=np.array(meta["medians"], dtype=float),
        fingerprint=meta["fingerprint"],
        config=PipelineConfig(**meta["config"]),
        run_id=meta["run_id"],
    )


def write_report(report: RunReport, out_dir) -> None:
    """report.json is deterministic; wall-clock timings go to timing.json."""
    with open(os.path.join(out_dir, REPORT_NAME), "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, TIMING_NAME), "w") as fh:
        json.dump({"timing_seconds": report.timing}, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# scoring


def _score_chunk(model: OutlierModel, table: FeatureTable, offset_ids=None):
    X = table.X.copy()
    bad = np.nonzero(~table.mask)
    X[bad] = model.medians[bad[1]]
    votes = predict_matrix(model.forest, X)
    scores = 1.0 - np.exp(joint_log_probability_matrix(model.vote_model, votes))
    period_col = FEATURE_NAMES.index("period")
    out = []
    aux = table.aux
    for i in range(len(table)):
        period = table.X[i, period_col] if table.mask[i, period_col] else float("nan")
        rec = CandidateRecord(
            object_id=table.ids[i],
            score=float(scores[i]),
            rank=0,
            votes=votes[i],
            features=X[i],
            mask_bits=int(np.sum(table.mask[i] * (1 << np.arange(N_FEATURES)))),
            period=float(period),
            ra=float(aux["ra"][i]) if "ra" in aux else float("nan"),
            dec=float(aux["dec"][i]) if "dec" in aux else float("nan"),
            mean_mag=float(aux["mean_mag"][i]) if "mean_mag" in aux else float("nan"),
            snr=float(aux["snr"][i]) if "snr" in aux else float("nan"),
            run_id=model.run_id,
        )
        if np.isfinite(rec.snr) and rec.snr < model.config.snr_floor:
            rec.annotations.append("low_snr")
        out.append(rec)
    return out


def _table_chunks(table: FeatureTable, size: int):
    for lo in range(0, len(table), size):
        hi = min(lo + size, len(table))
        yield FeatureTable(
            ids=table.ids[lo:hi], labels=table.labels[lo:hi],
            X=table.X[lo:hi], mask=table.mask[lo:hi],
            aux={k: v[lo:hi] for k, v in table.aux.items()},
        )


def _ranked(records: list, top_m: int) -> list:
    records.sort(key=lambda r: (-r.score, r.object_id))
    kept = records[: top_m if top_m and top_m > 0 else len(records)]
    for i, rec in enumerate(kept):
        rec.rank = i + 1
    return kept


def score_batch(model: OutlierModel, source, cfg: PipelineConfig = None) -> list:
    """Score a feature table (or iterable of chunk tables) into a ranked
    candidate list.

    Chunk size is fixed by config — never by worker count — so output is
    identical for any parallelism degree. Memory stays bounded by
    (workers + 1) chunks plus the retained top-m records. Schema mismatch
    is rejected before any scoring.
    """
    cfg = cfg or model.config
    if isinstance(source, FeatureTable):
        if source.X.ndim != 2 or source.X.shape[1] != model.forest.n_features:
            raise InvalidArgument(
                f"feature table has {source.X.shape[1]} columns; "
                f"model expects {model.forest.n_features}")
        chunks = _table_chunks(source, cfg.chunk_size)
    else:
        chunks = iter(source)

    top: list = []

    def check_and_score(chunk: FeatureTable):
        if chunk.X.shape[1] != model.forest.n_features:
            raise InvalidArgument(
                f"feature chunk has {chunk.X.shape[1]} columns; "
                f"model expects {model.forest.n_features}")
        return _score_chunk(model, chunk)

    if cfg.n_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
            for recs in pool.map(check_and_score, chunks):
                top.extend(recs)
                top = _ranked(top, cfg.top_m)
    else:
        for chunk in chunks:
            top.extend(check_and_score(chunk))
            top = _ranked(top, cfg.top_m)
    return _ranked(top, cfg.top_m)


CANDIDATE_STATIC_COLUMNS = [
    "object_id", "score", "rank", "period", "band", "triage_label", "run_id",
    "ra", "dec", "mean_mag", "snr",
]


def candidate_header(class_names) -> list:
    return (CANDIDATE_STATIC_COLUMNS
            + [f"v_{c}" for c in class_names]
            + [f"f{i + 1}" for i in range(N_FEATURES)]
            + ["mask_bits"])


def write_candidates(records: list, class_names, path) -> None:
    """Full-precision CSV; identical record lists give identical bytes."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(candidate_header(class_names)) + "\n")
        for r in records:
            row = [
                r.object_id, repr(float(r.score)), str(r.rank),
                repr(float(r.period)), r.band, r.triage_label, r.run_id,
                repr(float(r.ra)), repr(float(r.dec)),
                repr(float(r.mean_mag)), repr(float(r.snr)),
            ]
            row += [repr(float(v)) for v in r.votes]
            row += [repr(float(v)) for v in r.features]
            row.append(str(r.mask_bits))
            fh.write(",".join(row) + "\n")


def read_candidates(path, class_names=None) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:len(CANDIDATE_STATIC_COLUMNS)] != CANDIDATE_STATIC_COLUMNS:
            raise MalformedInput(f"unexpected candidate CSV header in {path}")
        vote_cols = [c for c in header if c.startswith("v_")]
        if class_names is not None and len(vote_cols) != len(class_names):
            raise InvalidArgument(
                f"candidate file has {len(vote_cols)} vote columns, expected "
                f"{len(class_names)}")
        k = len(vote_cols)
        base = len(CANDIDATE_STATIC_COLUMNS)
        records = []
        for row in reader:
            if len(row) != len(header):
                raise MalformedInput(f"bad candidate row width in {path}")
            records.append(CandidateRecord(
                object_id=row[0], score=float(row[1]), rank=int(row[2]),
                period=float(row[3]), band=row[4], triage_label=row[5],
                run_id=row[6], ra=float(row[7]), dec=float(row[8]),
                mean_mag=float(row[9]), snr=float(row[10]),
                votes=np.array([float(x) for x in row[base:base + k]]),
                features=np.array([float(x) for x in row[base + k:base + k + N_FEATURES]]),
                mask_bits=int(row[-1]),
            ))
    return records


def score_run(model: OutlierModel, table: FeatureTable, run_dir,
              cfg: PipelineConfig = None, report: RunReport = None) -> list:
    """Score + persist candidates.csv under the model's run directory."""
    cfg = cfg or model.config
    records = score_batch(model, table, cfg)
    out_dir = os.path.join(str(run_dir), model.run_id)
    os.makedirs(out_dir, exist_ok=True)
    write_candidates(records, model.class_names, os.path.join(out_dir, CANDIDATES_NAME))
    if report is not None:
        report.candidate_count = len(records)
        write_report(report, out_dir)
    return records


# ---------------------------------------------------------------------------
# validation


@dataclass
class LocoReport:
    held_class: str
    n_held: int
    n_total: int
    held_ranks: list               # ascending ranks of held objects
    scores_by_class: dict          # class -> list of scores
    macro_f_trained: float
    run_id: str

    def fraction_in_top(self, m: int) -> float:
        return float(np.mean(np.asarray(self.held_ranks) <= m)) if self.held_ranks else 0.0

    @property
    def ideal_line(self) -> list:
        """(i-th held object, its rank) pairs vs the ideal rank=i line."""
        return [(i + 1, r) for i, r in enumerate(sorted(self.held_ranks))]


def leave_one_class_out(table: FeatureTable, held_class: str,
                        cfg: PipelineConfig = None) -> LocoReport:
    """Hold a class out of training, score everything, report held ranks."""
    cfg = cfg or PipelineConfig()
    labels = np.array(table.labels)
    held_rows = np.nonzero(labels == held_class)[0]
    if len(held_rows) == 0:
        raise InvalidArgument(f"held class {held_class!r} not present")
    if len(held_rows) < 2:
        raise InvalidArgument(f"held class {held_class!r} needs >= 2 members")
    train_rows = np.nonzero(labels != held_class)[0]

    train_table = FeatureTable(
        ids=[table.ids[i] for i in train_rows],
        labels=[table.labels[i] for i in train_rows],
        X=table.X[train_rows], mask=table.mask[train_rows],
    ).impute()
    model, report = train_from_features(train_table, cfg)

    score_cfg = PipelineConfig(**{**cfg.to_dict(), "top_m": len(table)})
    records = score_batch(model, table, score_cfg)

    rank_of = {r.object_id: r.rank for r in records}
    score_of = {r.object_id: r.score for r in records}
    held_ids = {table.ids[i] for i in held_rows}
    held_ranks = sorted(rank_of[table.ids[i]] for i in held_rows)
    by_class: dict = {}
    for i, label in enumerate(table.labels):
        key = label if table.ids[i] not in held_ids else held_class
        by_class.setdefault(key, []).append(score_of[table.ids[i]])
    return LocoReport(
        held_class=held_class,
        n_held=len(held_rows),
        n_total=len(table),
        held_ranks=held_ranks,
        scores_by_class=by_class,
        macro_f_trained=report.macro_f,
        run_id=model.run_id,
    )


# ---------------------------------------------------------------------------
# artifact filters


def alias_periods() -> dict:
    """Named alias periods: sidereal/solar harmonics plus one year."""
    out = {}
    for base_name, base in (("sidereal", SIDEREAL_DAY), ("solar", SOLAR_DAY)):
        for h in ALIAS_HARMONICS:
            out[f"{base_name}x{h:g}"] = base * h
    out["year"] = YEAR_DAYS
    return out


def alias_filter(candidates: list, tolerance: float = 0.01):
    """Remove candidates whose period sits within relative ``tolerance`` of
    a sampling alias. Candidates with no valid period are kept.

    Returns (kept, removed, tally) where tally counts removals per alias
    name (nearest alias wins when several match).
    """
    if tolerance < 0:
        raise InvalidArgument("tolerance must be >= 0")
    aliases = alias_periods()
    kept, removed = [], []
    tally = {name: 0 for name in aliases}
    for rec in candidates:
        if not np.isfinite(rec.period):
            kept.append(rec)
            continue
        best_name, best_rel = None, np.inf
        for name, a in aliases.items():
            rel = abs(rec.period - a) / a
            if rel <= tolerance and rel < best_rel:
                best_name, best_rel = name, rel
        if best_name is None:
            kept.append(rec)
        else:
            tally[best_name] += 1
            removed.append(rec)
    return kept, removed, {k: v for k, v in tally.items() if v}


def cross_band_filter(candidates_blue: list, candidates_red: list,
                      depth: float = None,
                      depth_fraction: float = 0.001):
    """Keep blue candidates present in the top ``depth`` of the red list.

    ``depth`` defaults to ``depth_fraction`` of the red list length
    (minimum 1); ``depth=math.inf`` disables removal entirely.
    """
    if depth is None:
        depth = max(1, int(math.ceil(depth_fraction * len(candidates_red))))
    if depth != math.inf and depth <= 0:
        raise InvalidArgument(f"depth must be > 0, got {depth}")
    if math.isinf(depth):
        return list(candidates_blue), []
    red_sorted = sorted(candidates_red, key=lambda r: r.rank)
    top_red = {r.object_id for r in red_sorted[: int(depth)]}
    kept = [r for r in candidates_blue if r.object_id in top_red]
    removed = [r for r in candidates_blue if r.object_id not in top_red]
    return kept, removed


# ---------------------------------------------------------------------------
# retraining with artifact classes


def artifact_class_name(group: str) -> str:
    return f"artifact:{group}"


def retrain_with_artifacts(table: FeatureTable, artifact_groups: dict,
                           cfg: PipelineConfig = None, run_dir=None,
                           min_group: int = None) -> tuple:
    """Re-train with each artifact group as an additional class.

    ``artifact_groups`` maps group name -> iterable of object ids that must
    exist in the table. Empty mapping reduces to plain training.
    """
    cfg = cfg or PipelineConfig()
    if min_group is None:
        min_group = cfg.min_artifact_group
    id_to_row = {oid: i for i, oid in enumerate(table.ids)}
    new_labels = list(table.labels)
    for group, members in artifact_groups.items():
        if not group:
            raise InvalidArgument("artifact group name must be non-empty")
        present = [m for m in members if m in id_to_row]
        if len(present) < min_group:
            raise InvalidArgument(
                f"artifact group {group!r} has {len(present)} available "
                f"member(s); minimum is {min_group}")
        for oid in present:
            new_labels[id_to_row[oid]] = artifact_class_name(group)
    new_table = FeatureTable(
        ids=list(table.ids), labels=new_labels,
        X=table.X.copy(), mask=table.mask.copy(),
        aux={k: v.copy() for k, v in table.aux.items()},
    ).impute()
    return train_from_features(new_table, cfg, run_dir=run_dir)


# ---------------------------------------------------------------------------
# triage labels

LABEL_DECISIONS = ("artifact", "known", "interesting", "skip")


@dataclass
class TriageLabel:
    object_id: str
    decision: str       # artifact:<group> | known:<class> | interesting | skip
    reviewer: str
    timestamp: str      # RFC 3339
    run_id: str

    def to_dict(self) -> dict:
        return dict(object_id=self.object_id, decision=self.decision,
                    reviewer=self.reviewer, timestamp=self.timestamp,
                    run_id=self.run_id)


def validate_decision(decision: str) -> str:
    """Return the decision if well-formed, else raise InvalidArgument."""
    if decision in ("interesting", "skip"):
        return decision
    for prefix in ("artifact", "known"):
        if decision.startswith(prefix + ":"):
            if not decision[len(prefix) + 1:]:
                raise InvalidArgument(
                    f"{prefix} decision needs a non-empty name: {decision!r}")
            return decision
    raise InvalidArgument(
        f"unknown decision {decision!r}; expected interesting, skip, "
        "artifact:<group>, or known:<class>")


def append_label(path, label: TriageLabel) -> None:
    """Append one decision to the line-delimited label log."""
    validate_decision(label.decision)
    with open(path, "a") as fh:
        fh.write(json.dumps(label.to_dict(), sort_keys=True) + "\n")


def read_label_log(path) -> list:
    """All log entries in append order; malformed lines are fatal (the log
    is machine-written and append-only, so damage means trouble)."""
    entries = []
    try:
        fh = open(path)
    except OSError as exc:
        raise IoError(f"cannot read label log {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                entries.append(TriageLabel(
                    object_id=doc["object_id"], decision=doc["decision"],
                    reviewer=doc["reviewer"], timestamp=doc["timestamp"],
                    run_id=doc["run_id"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedInput(
                    f"label log {path} line {lineno} is invalid: {exc}") from exc
    return entries


def label_state(entries, run_id: str = None) -> dict:
    """Fold the append-order log into newest-wins state per object.

    Returns object_id -> triage_label for display: ``skip`` records the
    review event but leaves the shown state ``unreviewed``.
    """
    state: dict = {}
    for e in entries:
        if run_id is not None and e.run_id != run_id:
            continue
        state[e.object_id] = "unreviewed" if e.decision == "skip" else e.decision
    return state


def artifact_groups_from_labels(entries, run_id: str = None) -> dict:
    """group name -> sorted member ids from the newest-wins label state."""
    state = label_state(entries, run_id)
    groups: dict = {}
    for oid, decision in state.items():
        if decision.startswith("artifact:"):
            groups.setdefault(decision.split(":", 1)[1], []).append(oid)
    return {g: sorted(members) for g, members in sorted(groups.items())}


def apply_label_state(records: list, state: dict) -> list:
    """Stamp newest-wins triage labels onto candidate records in place."""
    for rec in records:
        if rec.object_id in state:
            rec.triage_label = state[rec.object_id]
    return records


# ---------------------------------------------------------------------------
# cross-matching


def angular_separation_deg(ra1, dec1, ra2, dec2):
    """Great-circle separation in degrees (haversine form, stable at small
    angles)."""
    ra1, dec1, ra2, dec2 = map(np.radians, (ra1, dec1, ra2, dec2))
    sd = np.sin((dec2 - dec1) / 2.0) ** 2
    sr = np.sin((ra2 - ra1) / 2.0) ** 2
    h = sd + np.cos(dec1) * np.cos(dec2) * sr
    return np.degrees(2.0 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0))))


@dataclass
class CrossmatchResult:
    matches: dict           # object_id -> (label, separation_arcsec, row_index)
    unmatched: list         # object_ids with no counterpart in radius
    skipped_rows: int
    per_label: dict


def load_catalog(path):
    """Catalog CSV with header ra_deg,dec_deg,label; bad rows are counted
    and skipped, not fatal."""
    rows, skipped = [], 0
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read catalog {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"ra_deg", "dec_deg", "label"} <= set(reader.fieldnames):
            raise MalformedInput(
                f"catalog {path} must have header ra_deg,dec_deg,label")
        for row in reader:
            try:
                rows.append((float(row["ra_deg"]), float(row["dec_deg"]),
                             row["label"].strip()))
            except (TypeError, ValueError):
                skipped += 1
    return rows, skipped


def crossmatch(candidates: list, catalog, radius_arcsec: float) -> CrossmatchResult:
    """Annotate each candidate with its nearest catalog row within radius.

    ``catalog`` is a list of (ra_deg, dec_deg, label) or (rows, skipped)
    from load_catalog. Ties in separation resolve to the lower row index.
    """
    if radius_arcsec <= 0:
        raise InvalidArgument("radius must be > 0 arcsec")
    skipped = 0
    if isinstance(catalog, tuple):
        catalog, skipped = catalog
    cat_ra = np.array([r[0] for r in catalog])
    cat_dec = np.array([r[1] for r in catalog])
    matches, unmatched, per_label = {}, [], {}
    for rec in candidates:
        if not (np.isfinite(rec.ra) and np.isfinite(rec.dec)) or len(catalog) == 0:
            unmatched.append(rec.object_id)
            rec.annotations.append("no counterpart")
            continue
        sep = angular_separation_deg(rec.ra, rec.dec, cat_ra, cat_dec) * 3600.0
        best = int(np.argmin(sep))  # first minimum = lowest row index on ties
        if sep[best] <= radius_arcsec:
            label = catalog[best][2]
            matches[rec.object_id] = (label, float(sep[best]), best)
            per_label[label] = per_label.get(label, 0) + 1
            rec.annotations.append(f"match:{label}@{sep[best]:.3f}as")
        else:
            unmatched.append(rec.object_id)
            rec.annotations.append("no counterpart")
    return CrossmatchResult(matches=matches, unmatched=unmatched,
                            skipped_rows=skipped, per_label=per_label)


# ---------------------------------------------------------------------------
# clustering + CMD export


@dataclass
class ClusterResult:
    assignments: np.ndarray
    k: int
    silhouette: float       # NaN when k fixed to 1
    cmd_rows: list          # (object_id, color, mean_mag, rank, score, cluster)


def cluster_candidates(candidates: list, k_clusters: int = None,
                       k_range=(2, 10), seed: int = 0) -> ClusterResult:
    """K-means over standardized candidate features.

    ``k_clusters=None`` selects k in ``k_range`` by silhouette; ``k=1`` is
    the trivial single group; k above the candidate count is rejected.
    """
    from sklearn.cluster import KMeans
    from sklearn.metrics import silhouette_score

    n = len(candidates)
    if n == 0:
        raise InvalidArgument("no candidates to cluster")
    if k_clusters is not None and k_clusters > n:
        raise InvalidArgument(f"k_clusters={k_clusters} exceeds candidate count {n}")

    X = np.array([rec.features for rec in candidates])
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    sigma[sigma == 0] = 1.0
    Z = (X - mu) / sigma

    if k_clusters == 1:
        labels = np.zeros(n, dtype=int)
        chosen, sil = 1, float("nan")
    else:
        best = None
        lo, hi = k_range
        ks = [k_clusters] if k_clusters else [k for k in range(lo, hi + 1) if k < n]
        if not ks:
            ks = [min(2, n)]
        for k in ks:
            km = KMeans(n_clusters=k, n_init=10, random_state=seed)
            labels_k = km.fit_predict(Z)
            if len(np.unique(labels_k)) < 2:
                score = -1.0
            else:
                score = float(silhouette_score(Z, labels_k))
            if best is None or score > best[0]:
                best = (score, k, labels_k)
        sil, chosen, labels = best

    color_col = FEATURE_NAMES.index("color")
    cmd_rows = [
        (rec.object_id, float(rec.features[color_col]), float(rec.mean_mag),
         rec.rank, float(rec.score), int(labels[i]))
        for i, rec in enumerate(candidates)
    ]
    return ClusterResult(assignments=np.asarray(labels), k=int(chosen),
                         silhouette=sil, cmd_rows=cmd_rows)


def write_cmd_export(result: ClusterResult, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("object_id,color,mean_mag,rank,score,cluster\n")
        for oid, color, mag, rank, score, cl in result.cmd_rows:
            fh.write(f"{oid},{repr(color)},{repr(mag)},{rank},{repr(score)},{cl}\n")
