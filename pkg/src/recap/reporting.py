"""Report rendering: aligned text tables, TSV files, and figures.

Every report artifact is written in three forms where it makes sense:
machine-readable JSON, tab-separated tables for downstream tooling, and a
rendered matplotlib figure next to them.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402
from .transition_graph import HopAnalysis  # noqa: E402


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def render_table(headers: list[str], rows: list[list]) -> str:
    """Simple aligned-column text table."""
    cells = [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def write_tsv(path: Path, headers: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(headers) + "\n")
        for row in rows:
            fh.write("\t".join("" if v is None else str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Evaluation report
# ---------------------------------------------------------------------------

def eval_report_tables(report: EvalReport) -> str:
    headers = ["group", "count", "hr@1", "hr@20", "ndcg@20", "mrr"]
    rows = []
    for name, group in (("overall", report.overall), ("head", report.head),
                        ("tail", report.tail)):
        rows.append([name, group.get("count"), group.get("hr@1"),
                     group.get("hr@20"), group.get("ndcg@20"), group.get("mrr")])
    main = render_table(headers, rows)

    share = report.pair_shares
    share_line = (
        f"unique test pairs: {share['unique_pairs']}  "
        f"tail share: {_fmt(share['tail_share'])}  "
        f"head share: {_fmt(share['head_share'])}  "
        f"(threshold m <= {report.tail_threshold})"
    )
    bin_headers = ["bin", "count", "hr@1", "hr@20", "ndcg@20", "mrr"]
    bin_rows = [[b["bin"], b["count"], b.get("hr@1"), b.get("hr@20"),
                 b.get("ndcg@20"), b.get("mrr")] for b in report.bins]
    bins = render_table(bin_headers, bin_rows)
    return f"{main}\n\n{share_line}\n\ntrain-frequency bins:\n{bins}\n"


def write_eval_report(report: EvalReport, out_dir: Path, stem: str = "eval_report") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out_dir / f"{stem}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    written.append(json_path)

    text_path = out_dir / f"{stem}.txt"
    text_path.write_text(eval_report_tables(report), encoding="utf-8")
    written.append(text_path)

    tsv_path = out_dir / f"{stem}_bins.tsv"
    write_tsv(tsv_path, ["bin", "count", "hr@1", "hr@20", "ndcg@20", "mrr"],
              [[b["bin"], b["count"], b.get("hr@1"), b.get("hr@20"),
                b.get("ndcg@20"), b.get("mrr")] for b in report.bins])
    written.append(tsv_path)

    written.append(plot_frequency_bins(report, out_dir / f"{stem}_bins.png"))
    return written


def plot_frequency_bins(report: EvalReport, path: Path) -> Path:
    bins = report.bins
    labels = [b["bin"] for b in bins]
    hr20 = [b.get("hr@20") or 0.0 for b in bins]
    hr1 = [b.get("hr@1") or 0.0 for b in bins]
    x = range(len(labels))

    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar([i - 0.2 for i in x], hr20, width=0.4, label="HR@20")
    ax.bar([i + 0.2 for i in x], hr1, width=0.4, label="HR@1")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_xlabel("train transition frequency")
    ax.set_ylabel("hit ratio")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Hop analysis
# ---------------------------------------------------------------------------

def hop_analysis_rows(analysis: HopAnalysis) -> list[list]:
    rows = []
    for rec in analysis.records:
        snr_scaled = None if rec.snr == float("inf") else 1000.0 * rec.snr
        rows.append([rec.hops, round(rec.avg_candidates, 1),
                     round(100.0 * rec.coverage, 2), snr_scaled])
    return rows


def hop_analysis_table(analysis: HopAnalysis) -> str:
    headers = ["N", "avg candidates", "coverage %", "1000 x SNR"]
    rows = []
    for raw in hop_analysis_rows(analysis):
        rows.append([raw[0], raw[1], raw[2],
                     "inf" if raw[3] is None else round(raw[3], 3)])
    table = render_table(headers, rows)
    return (f"{table}\n\nunseen test transitions: {analysis.num_unseen} "
            f"over {analysis.num_sources} sources\n")


def hop_analysis_to_dict(analysis: HopAnalysis) -> dict:
    return {
        "num_unseen": analysis.num_unseen,
        "num_sources": analysis.num_sources,
        "records": [
            {
                "hops": r.hops,
                "avg_candidates": r.avg_candidates,
                "covered": r.covered,
                "coverage": r.coverage,
                "candidate_total": r.candidate_total,
                "snr": None if r.snr == float("inf") else r.snr,
                "snr_infinite": r.snr == float("inf"),
            }
            for r in analysis.records
        ],
    }


def write_hop_analysis(analysis: HopAnalysis, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out_dir / "hop_analysis.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(hop_analysis_to_dict(analysis), fh, indent=2)
        fh.write("\n")
    written.append(json_path)

    txt_path = out_dir / "hop_analysis.txt"
    txt_path.write_text(hop_analysis_table(analysis), encoding="utf-8")
    written.append(txt_path)

    write_tsv(out_dir / "hop_analysis.tsv",
              ["hops", "avg_candidates", "coverage_pct", "snr_x1000"],
              hop_analysis_rows(analysis))
    written.append(out_dir / "hop_analysis.tsv")

    written.append(plot_hop_analysis(analysis, out_dir / "hop_analysis.png"))
    return written


def plot_hop_analysis(analysis: HopAnalysis, path: Path) -> Path:
    hops = [r.hops for r in analysis.records]
    coverage = [100.0 * r.coverage for r in analysis.records]
    snr = [0.0 if r.snr == float("inf") else 1000.0 * r.snr for r in analysis.records]

    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(hops, coverage, marker="o", color="tab:blue", label="coverage %")
    ax1.set_xlabel("hops")
    ax1.set_ylabel("unseen coverage %", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(hops, snr, marker="s", color="tab:red", label="1000 x SNR")
    ax2.set_ylabel("1000 x SNR", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Training curves
# ---------------------------------------------------------------------------

def plot_training_curves(history: list[dict], path: Path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax1.plot(epochs, [h["loss_main"] for h in history], label="main loss")
    warm = [(h["epoch"], h["loss_warm"]) for h in history if h.get("loss_warm") is not None]
    if warm:
        ax1.plot([w[0] for w in warm], [w[1] for w in warm], label="warm loss")
    ax1.set_ylabel("loss")
    ax1.legend()

    ax2.plot(epochs, [h["val_mrr"] for h in history], label="val MRR")
    ax2.plot(epochs, [h["graph_scale"] for h in history], linestyle="--",
             label="graph scale")
    ax2.plot(epochs, [h["warm_weight"] for h in history], linestyle=":",
             label="warm weight")
    ax2.set_xlabel("epoch")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def load_history(log_path: Path) -> list[dict]:
    history = []
    with open(log_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                history.append(json.loads(line))
    return history
