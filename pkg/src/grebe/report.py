"""Report rendering: delimited outputs plus matplotlib figures.

Every report path writes machine-readable files (TSV/JSON) and, next to
them, PNG figures of the same data.  matplotlib is imported lazily with the
Agg backend so headless runs and library users that never render figures
pay nothing.
"""

from __future__ import annotations

import json

import numpy as np

from .evaluator import RankReport


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def write_rank_tsv(report: RankReport, path: str) -> None:
    """Per-edge ranks: edge index, corruption side, rank."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("edge\tside\trank\n")
        for i, r in enumerate(report.src_ranks):
            f.write(f"{i}\tsource\t{int(r)}\n")
        for i, r in enumerate(report.dst_ranks):
            f.write(f"{i}\tdest\t{int(r)}\n")


def write_summary_json(report: RankReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def save_rank_histogram(report: RankReport, path: str) -> None:
    plt = _plt()
    ranks = report.ranks
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if ranks.size:
        edges = np.logspace(0, np.log10(max(ranks.max(), 2)), 40)
        ax.hist(ranks, bins=edges, color="#336699", alpha=0.85)
        ax.set_xscale("log")
    ax.set_xlabel("rank")
    ax.set_ylabel("edges")
    ax.set_title(f"rank distribution ({report.mode}, MRR={report.mrr:.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_hits_curve(report: RankReport, path: str, max_k: int = 100) -> None:
    plt = _plt()
    ks = np.unique(np.round(np.logspace(0, np.log10(max_k), 24)).astype(int))
    hits = [report.hits(int(k)) for k in ks]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ks, hits, marker="o", ms=3, color="#994433")
    ax.set_xscale("log")
    ax.set_ylim(0, 1)
    ax.set_xlabel("k")
    ax.set_ylabel("hits@k")
    ax.set_title(f"hits@k ({report.mode})")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def eval_report_files(report: RankReport, out_dir: str, plots: bool = True) -> list[str]:
    """Write the standard evaluation bundle into a directory."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    files = []
    p = os.path.join(out_dir, "ranks.tsv")
    write_rank_tsv(report, p)
    files.append(p)
    p = os.path.join(out_dir, "summary.json")
    write_summary_json(report, p)
    files.append(p)
    if plots:
        p = os.path.join(out_dir, "rank_histogram.png")
        save_rank_histogram(report, p)
        files.append(p)
        p = os.path.join(out_dir, "hits_curve.png")
        save_hits_curve(report, p)
        files.append(p)
    return files


def write_bench_tsv(results: list, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("mode\tnegatives_per_positive\tedges_per_second\tedges\tseconds\n")
        for r in results:
            f.write(f"{r.mode}\t{r.bn}\t{r.edges_per_second:.1f}\t{r.edges}\t{r.seconds:.3f}\n")


def save_throughput_figure(results: list, path: str) -> None:
    """Training speed vs negatives per edge, one line per sampling mode."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    modes = sorted({r.mode for r in results})
    colors = {"batched": "#336699", "naive": "#cc6622"}
    for mode in modes:
        pts = sorted((r.bn, r.edges_per_second) for r in results if r.mode == mode)
        ax.plot(
            [p[0] for p in pts],
            [p[1] for p in pts],
            marker="o",
            label=mode,
            color=colors.get(mode),
        )
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("negatives per edge")
    ax.set_ylabel("edges / second")
    ax.set_title("negative sampling throughput")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
