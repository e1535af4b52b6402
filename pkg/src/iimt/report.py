"""Report serialization: JSON metrics, bucket CSV, and figure rendering."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricReport  # noqa: E402


def write_metric_report(report: MetricReport, out_dir) -> dict:
    """Write report.json, wer_buckets.csv, and wer_buckets.png; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    json_path = out_dir / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")

    csv_path = out_dir / "wer_buckets.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wer_lo", "wer_hi", "count", "bleu"])
        for b in report.buckets:
            hi = "" if b["hi"] is None else b["hi"]
            bleu_val = "" if b["bleu"] is None else f"{b['bleu']:.6f}"
            writer.writerow([b["lo"], hi, b["count"], bleu_val])

    fig_path = out_dir / "wer_buckets.png"
    _plot_buckets(report, fig_path)
    return {"json": json_path, "csv": csv_path, "figure": fig_path}


def _plot_buckets(report: MetricReport, path: Path):
    labels, values, counts = [], [], []
    for b in report.buckets:
        hi = "inf" if b["hi"] is None else f"{b['hi']:g}"
        labels.append(f"[{b['lo']:g}, {hi})")
        values.append(b["bleu"] if b["bleu"] is not None else 0.0)
        counts.append(b["count"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bars = ax.bar(labels, values, color="#4878d0")
    for bar, count in zip(bars, counts):
        ax.annotate(f"n={count}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xlabel("source-image WER bucket")
    ax.set_ylabel("BLEU")
    ax.set_title("Translation quality by recognition difficulty")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_loss_curve(log_records: Sequence[dict], path, terms: List[str] | None = None):
    """Render per-step loss curves from training log records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not log_records:
        return
    if terms is None:
        terms = [k for k in log_records[0] if k.startswith("l_")]
    steps = [rec["step"] for rec in log_records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for term in terms:
        ax.plot(steps, [rec.get(term, 0.0) for rec in log_records], label=term)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
