"""Figure rendering for run reports.

Every function takes explicit data and an output path, writes one PNG with
the Agg backend, and returns the path, so the CLI report path can drop
figures next to the delimited artifacts without a display server.
"""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .pipeline import ClusterResult, LocoReport, RunReport

SCORE_FIG = "score_distribution.png"
NETWORK_FIG = "vote_network.png"
RANK_FIG = "rank_curve.png"
CMD_FIG = "cmd.png"


def render_score_distribution(records, path, bins: int = 50):
    """Histogram of candidate outlier scores (log counts)."""
    scores = np.array([r.score for r in records], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(scores):
        ax.hist(scores, bins=bins, range=(0.0, 1.0), color="#4878cf",
                edgecolor="white", linewidth=0.3)
    ax.set_yscale("symlog")
    ax.set_xlabel("outlier score")
    ax.set_ylabel("candidates")
    ax.set_title(f"score distribution (n={len(scores)})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_vote_network(class_names, parents, path):
    """Learned dependency graph: nodes on a circle, arrows parent -> child."""
    k = len(class_names)
    theta = 2.0 * math.pi * np.arange(k) / max(k, 1) + math.pi / 2.0
    xs, ys = np.cos(theta), np.sin(theta)
    fig, ax = plt.subplots(figsize=(5, 5))
    for child, ps in enumerate(parents):
        for p in ps:
            dx, dy = xs[child] - xs[p], ys[child] - ys[p]
            norm = math.hypot(dx, dy) or 1.0
            shrink = 0.16  # keep arrowheads outside the node circles
            ax.annotate(
                "", xy=(xs[child] - dx / norm * shrink,
                        ys[child] - dy / norm * shrink),
                xytext=(xs[p] + dx / norm * shrink, ys[p] + dy / norm * shrink),
                arrowprops=dict(arrowstyle="-|>", color="#555555", lw=1.2))
    ax.scatter(xs, ys, s=900, c="#f0f0f5", edgecolors="#333333", zorder=3)
    for j, name in enumerate(class_names):
        ax.annotate(str(name), (xs[j], ys[j]), ha="center", va="center",
                    fontsize=8, zorder=4)
    ax.set_xlim(-1.4, 1.4)
    ax.set_ylim(-1.4, 1.4)
    ax.set_aspect("equal")
    ax.axis("off")
    ax.set_title("vote dependency network")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_rank_curve(loco_reports, path, highlight_top: int = None):
    """Held-class ranks against the ideal (rank = position) diagonal."""
    if isinstance(loco_reports, LocoReport):
        loco_reports = [loco_reports]
    fig, ax = plt.subplots(figsize=(6, 4))
    worst = 1
    for rep in loco_reports:
        pairs = rep.ideal_line
        if not pairs:
            continue
        xs = [p[0] for p in pairs]
        ys = [p[1] for p in pairs]
        worst = max(worst, max(ys))
        ax.step(xs, ys, where="post", label=f"{rep.held_class} (n={rep.n_held})")
    lim = max(worst, max((r.n_held for r in loco_reports), default=1))
    ax.plot([1, lim], [1, lim], ls="--", c="#999999", lw=1, label="ideal")
    if highlight_top:
        ax.axhline(highlight_top, ls=":", c="#cc3333", lw=1,
                   label=f"top {highlight_top}")
    ax.set_xlabel("held object (sorted)")
    ax.set_ylabel("rank in scored list")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("held-out class recovery")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_cmd(result: ClusterResult, path):
    """Color-magnitude diagram of candidates, colored by cluster."""
    fig, ax = plt.subplots(figsize=(6, 5))
    rows = result.cmd_rows
    color = np.array([r[1] for r in rows], dtype=float)
    mag = np.array([r[2] for r in rows], dtype=float)
    cl = np.array([r[5] for r in rows], dtype=int)
    ok = np.isfinite(color) & np.isfinite(mag)
    if ok.any():
        sc = ax.scatter(color[ok], mag[ok], c=cl[ok], cmap="tab10", s=14,
                        alpha=0.85)
        fig.colorbar(sc, ax=ax, label="cluster", ticks=range(result.k))
        ax.invert_yaxis()  # brighter objects plot higher
    ax.set_xlabel("color (blue - red)")
    ax.set_ylabel("mean magnitude")
    ax.set_title(f"candidate CMD (k={result.k})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_run_figures(report: RunReport, records, out_dir,
                       loco_reports=None, cluster_result=None) -> list:
    """Render every figure the available data supports; returns paths."""
    written = []
    written.append(render_score_distribution(
        records, os.path.join(out_dir, SCORE_FIG)))
    written.append(render_vote_network(
        report.class_names, report.structure_parents,
        os.path.join(out_dir, NETWORK_FIG)))
    if loco_reports:
        written.append(render_rank_curve(
            loco_reports, os.path.join(out_dir, RANK_FIG)))
    if cluster_result is not None:
        written.append(render_cmd(cluster_result, os.path.join(out_dir, CMD_FIG)))
    return written
