"""HTTP triage service: browse ranked candidates, record review decisions,
and launch retraining runs.

All state lives in the run directory tree and one append-only label log
(``labels.jsonl`` at the run root), so a restarted service serves byte-
identical payloads. Label appends are serialized by a lock; retrain jobs
run one at a time on a single background worker while reads continue.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import queue
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import pipeline as P
from .errors import (
    Conflict,
    InvalidArgument,
    IoError,
    LcAnomalyError,
    MalformedInput,
    NotFound,
    StageError,
)
from .features import read_feature_table
from .lightcurve import fold, load_lightcurve, load_manifest


def rfc3339_now() -> str:
    return (datetime.now(timezone.utc)
            .isoformat(timespec="seconds").replace("+00:00", "Z"))


def _clean(x):
    """NaN is not valid JSON; send null instead."""
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


@dataclass
class RetrainJob:
    job_id: str
    source_run_id: str
    groups: dict                  # group name -> member ids, fixed at submit
    status: str = "queued"        # queued -> running -> done | failed
    result_run_id: str = None
    error: str = None
    stage: str = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "source_run_id": self.source_run_id,
            "groups": {g: list(m) for g, m in self.groups.items()},
            "status": self.status,
            "result_run_id": self.result_run_id,
            "error": self.error,
            "stage": self.stage,
        }


@dataclass
class _Run:
    run_id: str
    path: str
    records: list
    report: dict
    config: dict
    iteration: int = 0
    source_run_id: str = None


LINEAGE_NAME = "lineage.json"


class TriageService:
    """Run-directory browser + label log + retrain queue (HTTP-agnostic)."""

    def __init__(self, run_root, manifest_path=None, token: str = None):
        self.run_root = str(run_root)
        self.token = token
        self.labels_path = os.path.join(self.run_root, P.LABELS_NAME)
        self.manifest = (load_manifest(manifest_path, require_labels=False)
                         if manifest_path else None)
        self._entries_by_id = (
            {e.object_id: e for e in self.manifest.entries}
            if self.manifest else {})
        self._lock = threading.Lock()
        self._runs: dict = {}
        self._jobs: dict = {}
        self._job_counter = itertools.count(1)
        self._queue: queue.Queue = queue.Queue()
        self._worker = None
        self._labels: list = []
        self.reload()

    # -- state loading ------------------------------------------------------

    def reload(self) -> None:
        """Rebuild every read model from disk (used at startup)."""
        with self._lock:
            self._runs.clear()
            if os.path.isdir(self.run_root):
                for name in sorted(os.listdir(self.run_root)):
                    run_path = os.path.join(self.run_root, name)
                    if os.path.isfile(os.path.join(run_path, P.CANDIDATES_NAME)):
                        self._runs[name] = self._load_run(name, run_path)
            self._labels = (P.read_label_log(self.labels_path)
                            if os.path.isfile(self.labels_path) else [])

    @staticmethod
    def _load_run(run_id: str, run_path: str) -> _Run:
        records = P.read_candidates(os.path.join(run_path, P.CANDIDATES_NAME))
        report, config = {}, {}
        report_path = os.path.join(run_path, P.REPORT_NAME)
        if os.path.isfile(report_path):
            with open(report_path) as fh:
                report = json.load(fh)
            config = report.get("config", {})
        iteration, source = 0, None
        lineage_path = os.path.join(run_path, LINEAGE_NAME)
        if os.path.isfile(lineage_path):
            with open(lineage_path) as fh:
                lineage = json.load(fh)
            iteration = int(lineage.get("iteration", 0))
            source = lineage.get("source_run_id")
        return _Run(run_id=run_id, path=run_path, records=records,
                    report=report, config=config, iteration=iteration,
                    source_run_id=source)

    def _run(self, run_id: str) -> _Run:
        run = self._runs.get(run_id)
        if run is None:
            raise NotFound(f"run {run_id!r} not found under {self.run_root}")
        return run

    # -- reads ---------------------------------------------------------------

    def list_runs(self) -> list:
        with self._lock:
            runs = sorted(self._runs.values(),
                          key=lambda r: (r.iteration, r.run_id))
            out = []
            for run in runs:
                state = P.label_state(self._labels, run.run_id)
                reviewed = sum(1 for v in state.values() if v != "unreviewed")
                out.append({
                    "run_id": run.run_id,
                    "candidate_count": len(run.records),
                    "class_names": run.report.get("class_names", []),
                    "iteration": run.iteration,
                    "source_run_id": run.source_run_id,
                    "reviewed_count": reviewed,
                    "min_artifact_group": int(
                        run.config.get("min_artifact_group", 5)),
                })
            return out

    def _candidate_payload(self, rec, state: dict) -> dict:
        return {
            "object_id": rec.object_id,
            "score": rec.score,
            "rank": rec.rank,
            "votes": [float(v) for v in rec.votes],
            "features": [_clean(float(v)) for v in rec.features],
            "mask_bits": rec.mask_bits,
            "period": _clean(rec.period),
            "band": rec.band,
            "triage_label": state.get(rec.object_id, rec.triage_label),
            "run_id": rec.run_id,
            "ra": _clean(rec.ra),
            "dec": _clean(rec.dec),
            "mean_mag": _clean(rec.mean_mag),
            "snr": _clean(rec.snr),
            "annotations": list(rec.annotations),
        }

    def list_candidates(self, run_id: str, page: int = 1, size: int = 50,
                        label_filter: str = None) -> dict:
        if page < 1 or size < 1:
            raise InvalidArgument("page and size must be >= 1")
        with self._lock:
            run = self._run(run_id)
            state = P.label_state(self._labels, run_id)
            rows = run.records
            if label_filter:
                rows = [r for r in rows
                        if state.get(r.object_id, "unreviewed")
                        .startswith(label_filter)]
            total = len(rows)
            lo = (page - 1) * size
            page_rows = rows[lo: lo + size]
            return {
                "run_id": run_id,
                "page": page,
                "size": size,
                "total": total,
                "candidates": [self._candidate_payload(r, state)
                               for r in page_rows],
            }

    def get_candidate(self, run_id: str, object_id: str) -> dict:
        with self._lock:
            run = self._run(run_id)
            state = P.label_state(self._labels, run_id)
            rec = next((r for r in run.records if r.object_id == object_id),
                       None)
        if rec is None:
            raise NotFound(f"candidate {object_id!r} not in run {run_id!r}")
        payload = self._candidate_payload(rec, state)
        payload["curve"] = None
        payload["folded"] = None
        payload["folded_valid"] = False
        entry = self._entries_by_id.get(object_id)
        if entry is not None:
            try:
                lc = load_lightcurve(entry.path, band="blue",
                                     object_id=object_id)
            except IoError as exc:
                raise NotFound(
                    f"curve file for {object_id!r} unreadable: "
                    f"{entry.path}") from exc
            payload["curve"] = {
                "times": [float(t) for t in lc.times],
                "magnitudes": [float(m) for m in lc.magnitudes],
                "errors": [float(e) for e in lc.errors],
            }
            if rec.period_valid:
                folded = fold(lc, rec.period)
                payload["folded"] = {
                    "phases": [float(p) for p in folded.phases],
                    "magnitudes": [float(m) for m in folded.magnitudes],
                }
                payload["folded_valid"] = True
        elif self.manifest is not None:
            raise NotFound(
                f"no curve source for {object_id!r} in manifest "
                f"{self.manifest.path}")
        return payload

    # -- writes ---------------------------------------------------------------

    def post_label(self, run_id: str, object_id: str, decision: str,
                   reviewer: str, timestamp: str = None) -> dict:
        decision = P.validate_decision(decision)
        if not reviewer:
            raise InvalidArgument("reviewer must be non-empty")
        with self._lock:
            run = self._run(run_id)
            if all(r.object_id != object_id for r in run.records):
                raise NotFound(
                    f"candidate {object_id!r} not in run {run_id!r}")
            label = P.TriageLabel(
                object_id=object_id, decision=decision, reviewer=reviewer,
                timestamp=timestamp or rfc3339_now(), run_id=run_id)
            os.makedirs(self.run_root, exist_ok=True)
            P.append_label(self.labels_path, label)
            self._labels.append(label)
            return label.to_dict()

    def start_retrain(self, run_id: str, group_names: list) -> dict:
        if not group_names:
            raise InvalidArgument("groups must be a non-empty list of names")
        with self._lock:
            run = self._run(run_id)
            min_group = int(run.config.get("min_artifact_group", 5))
            available = P.artifact_groups_from_labels(self._labels, run_id)
            groups = {}
            for name in group_names:
                members = available.get(name, [])
                if len(members) < min_group:
                    raise Conflict(
                        f"artifact group {name!r} has {len(members)} "
                        f"member(s); minimum is {min_group}")
                groups[name] = members
            job = RetrainJob(job_id=f"job-{next(self._job_counter):06d}",
                             source_run_id=run_id, groups=groups)
            self._jobs[job.job_id] = job
            self._ensure_worker()
            self._queue.put(job)
            return job.to_dict()

    def get_job(self, job_id: str) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise NotFound(f"job {job_id!r} not found")
            return job.to_dict()

    # -- retrain worker -------------------------------------------------------

    def _ensure_worker(self) -> None:
        if self._worker is None or not self._worker.is_alive():
            self._worker = threading.Thread(target=self._worker_loop,
                                            daemon=True)
            self._worker.start()

    def _worker_loop(self) -> None:
        while True:
            job = self._queue.get()
            if job is None:
                return
            with self._lock:
                job.status = "running"
            try:
                result_run_id = self._execute_retrain(job)
                with self._lock:
                    job.result_run_id = result_run_id
                    job.status = "done"
            except StageError as exc:
                with self._lock:
                    job.status = "failed"
                    job.error = str(exc)
                    job.stage = exc.stage
            except LcAnomalyError as exc:
                with self._lock:
                    job.status = "failed"
                    job.error = str(exc)
                    job.stage = type(exc).__name__
            finally:
                self._queue.task_done()

    def _execute_retrain(self, job: RetrainJob) -> str:
        with self._lock:
            source = self._run(job.source_run_id)
        features_path = os.path.join(source.path, P.FEATURES_NAME)
        if not os.path.isfile(features_path):
            raise StageError("features",
                             f"source run has no feature table: {features_path}")
        table = read_feature_table(features_path)
        cfg = (P.PipelineConfig(**source.config) if source.config
               else P.PipelineConfig())
        model, report = P.retrain_with_artifacts(table, job.groups, cfg,
                                                 run_dir=self.run_root)
        P.score_run(model, table, self.run_root, report=report)
        run_path = os.path.join(self.run_root, model.run_id)
        with open(os.path.join(run_path, LINEAGE_NAME), "w") as fh:
            json.dump({
                "source_run_id": job.source_run_id,
                "groups": {g: list(m) for g, m in job.groups.items()},
                "iteration": source.iteration + 1,
            }, fh, sort_keys=True, indent=1)
            fh.write("\n")
        with self._lock:
            self._runs[model.run_id] = self._load_run(model.run_id, run_path)
        return model.run_id


# ---------------------------------------------------------------------------
# HTTP layer


def create_app(service: TriageService) -> FastAPI:
    app = FastAPI(title="lcanomaly triage service")

    @app.exception_handler(LcAnomalyError)
    async def _domain_error(request: Request, exc: LcAnomalyError):
        if isinstance(exc, NotFound):
            code = 404
        elif isinstance(exc, Conflict):
            code = 409
        elif isinstance(exc, (InvalidArgument, MalformedInput)):
            code = 400
        else:
            code = 500
        return JSONResponse({"detail": str(exc),
                             "category": type(exc).__name__,
                             "stage": getattr(exc, "stage", None)},
                            status_code=code)

    @app.middleware("http")
    async def _auth(request: Request, call_next):
        if service.token is not None:
            if request.headers.get("x-auth-token") != service.token:
                return JSONResponse({"detail": "missing or bad auth token"},
                                    status_code=401)
        return await call_next(request)

    @app.get("/runs")
    async def runs():
        return {"runs": service.list_runs()}

    @app.get("/runs/{run_id}/candidates")
    async def candidates(run_id: str, page: int = 1, size: int = 50,
                         filter: str = None):
        return service.list_candidates(run_id, page=page, size=size,
                                       label_filter=filter)

    @app.get("/runs/{run_id}/candidates/{object_id}")
    async def candidate_detail(run_id: str, object_id: str):
        return service.get_candidate(run_id, object_id)

    @app.post("/runs/{run_id}/candidates/{object_id}/label")
    async def label(run_id: str, object_id: str, request: Request):
        body = await _json_body(request)
        return service.post_label(
            run_id, object_id,
            decision=body.get("decision", ""),
            reviewer=body.get("reviewer", ""),
            timestamp=body.get("timestamp"))

    @app.post("/runs/{run_id}/retrain", status_code=202)
    async def retrain(run_id: str, request: Request):
        body = await _json_body(request)
        groups = body.get("groups")
        if groups is None or not isinstance(groups, list):
            raise InvalidArgument("body must carry a 'groups' name list")
        return service.start_retrain(run_id, groups)

    @app.get("/jobs/{job_id}")
    async def job(job_id: str):
        return service.get_job(job_id)

    return app


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except Exception as exc:  # json decode error surfaces as 400
        raise MalformedInput(f"request body is not JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise MalformedInput("request body must be a JSON object")
    return body
