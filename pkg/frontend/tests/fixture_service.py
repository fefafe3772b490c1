#!/usr/bin/env python3
"""Boot a disposable triage service over a synthetic run for UI tests.

Builds one scored run (three Gaussian classes in feature space, one
light-curve file per object), starts the HTTP service on a free port, and
prints ``READY <port> <run_root>`` once it accepts requests. Serves until
killed; exits on its own if the parent test process disappears.
"""

import os
import socket
import tempfile
import threading
import time

import numpy as np
import uvicorn

from lcanomaly import pipeline as P
from lcanomaly.features import FEATURE_NAMES, FeatureTable
from lcanomaly.lightcurve import LightCurve, write_lightcurve
from lcanomaly.service import TriageService, create_app

N_FEATURES = len(FEATURE_NAMES)
N_CLASSES = 3
N_PER_CLASS = 20
CURVE_POINTS = 60


def build_fixture(base: str) -> tuple:
    """Train + score one run and write a manifest of curve files."""
    rng = np.random.default_rng(5)
    centers = rng.normal(scale=4.0, size=(N_CLASSES, N_FEATURES))
    rows, labels = [], []
    for c in range(N_CLASSES):
        rows.append(centers[c] + rng.standard_normal((N_PER_CLASS, N_FEATURES)))
        labels += [f"class{c}"] * N_PER_CLASS
    X = np.vstack(rows)
    # the period column must hold a foldable (positive) period; keep it near
    # the written curves' true 0.8 d so the folded panels look sensible
    X[:, FEATURE_NAMES.index("period")] = 0.8 + rng.normal(0, 0.02, len(X))
    ids = [f"obj{i:05d}" for i in range(len(X))]
    aux = {
        "ra": rng.uniform(0, 360, len(X)),
        "dec": rng.uniform(-60, 60, len(X)),
        "mean_mag": rng.uniform(13, 19, len(X)),
        "snr": rng.uniform(6, 40, len(X)),
    }
    table = FeatureTable(ids=ids, labels=labels, X=X,
                         mask=np.ones_like(X, dtype=bool), aux=aux).impute()
    # one object with no measurable period, so the UI's fallback shows up
    table.mask[0, FEATURE_NAMES.index("period")] = False

    run_root = os.path.join(base, "runs")
    cfg = P.PipelineConfig(seed=5, n_trees=80, top_m=0, chunk_size=64)
    model, report = P.train_from_features(table, cfg, run_dir=run_root)
    P.score_run(model, table, run_root, report=report)

    curve_dir = os.path.join(base, "curves")
    os.makedirs(curve_dir, exist_ok=True)
    lines = ["id,path,label,ra_deg,dec_deg"]
    for i, oid in enumerate(ids):
        t = np.sort(rng.uniform(0, 25.0, CURVE_POINTS))
        t += np.arange(CURVE_POINTS) * 1e-9
        m = (15.0 + 0.4 * np.sin(2 * np.pi * t / 0.8)
             + rng.normal(0, 0.02, CURVE_POINTS))
        lc = LightCurve(oid, "blue", t, m, np.full(CURVE_POINTS, 0.02))
        write_lightcurve(lc, os.path.join(curve_dir, f"{oid}.dat"))
        lines.append(f"{oid},curves/{oid}.dat,,"
                     f"{aux['ra'][i]:.4f},{aux['dec'][i]:.4f}")
    manifest = os.path.join(base, "manifest.csv")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return run_root, manifest


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def watch_parent(parent_pid: int) -> None:
    """Exit when the spawning test process goes away (reparented to init)."""
    while os.getppid() == parent_pid:
        time.sleep(1.0)
    os._exit(0)


def main() -> None:
    parent_pid = os.getppid()
    threading.Thread(target=watch_parent, args=(parent_pid,),
                     daemon=True).start()
    base = tempfile.mkdtemp(prefix="triage-ui-fixture-")
    run_root, manifest = build_fixture(base)
    service = TriageService(run_root=run_root, manifest_path=manifest)
    app = create_app(service)
    port = free_port()
    server = uvicorn.Server(uvicorn.Config(
        app, host="127.0.0.1", port=port, log_level="warning"))

    def announce() -> None:
        while not server.started:
            time.sleep(0.02)
        print(f"READY {port} {run_root}", flush=True)

    threading.Thread(target=announce, daemon=True).start()
    server.run()


if __name__ == "__main__":
    main()
