"""Report rendering: delimited metrics files plus figures.

Metrics are written as tab-separated text (one record per epoch, field order
epoch / train_loss / val_mse, then summary key-value lines). Figures are
rendered next to the text output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import MetricsReport  # noqa: E402

METRICS_FIELDS = ("epoch", "train_loss", "val_mse")


def write_metrics(report: MetricsReport, path):
    """One TSV record per epoch followed by summary lines."""
    path = Path(path)
    lines = ["# " + "\t".join(METRICS_FIELDS)]
    for rec in report.epochs:
        lines.append(f"{rec.epoch}\t{rec.train_loss:.12g}\t{rec.val_mse:.12g}")
    lines.append(f"best_epoch\t{report.best_epoch}")
    lines.append(f"test_mse\t{report.test_mse:.12g}")
    lines.append(f"sec_per_iter\t{report.sec_per_iter:.12g}")
    lines.append(f"peak_mem_bytes\t{report.peak_mem_bytes}")
    lines.append(f"diverged\t{int(report.diverged)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metrics(path):
    """Parse a metrics file back into per-epoch rows and a summary dict."""
    rows, summary = [], {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if parts[0].isdigit():
            rows.append(
                {"epoch": int(parts[0]), "train_loss": float(parts[1]), "val_mse": float(parts[2])}
            )
        else:
            summary[parts[0]] = parts[1]
    return rows, summary


def render_training_curve(report: MetricsReport, path):
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r.epoch for r in report.epochs]
    ax.plot(epochs, [r.train_loss for r in report.epochs], label="train loss")
    ax.plot(epochs, [r.val_mse for r in report.epochs], label="val MSE")
    if report.best_epoch > 0:
        ax.axvline(report.best_epoch, color="gray", ls="--", lw=0.8, label="best epoch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_bench_table(rows, path):
    """Delimited benchmark table: model / sec_per_iter / peak memory / tape bytes."""
    path = Path(path)
    lines = ["# model\tsec_per_iter\tsec_per_iter_std\tpeak_mem_bytes\ttape_bytes"]
    for row in rows:
        lines.append(
            f"{row['model']}\t{row['sec_per_iter']:.6g}\t{row['sec_per_iter_std']:.6g}"
            f"\t{row['peak_mem_bytes']}\t{row['tape_bytes']}"
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def render_bench_figure(rows, path):
    path = Path(path)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    names = [r["model"] for r in rows]
    ax1.bar(names, [r["sec_per_iter"] for r in rows])
    ax1.set_ylabel("seconds / iteration")
    ax1.tick_params(axis="x", rotation=30)
    ax2.bar(names, [r["tape_bytes"] / 2**20 for r in rows], color="tab:orange")
    ax2.set_ylabel("tape MiB / iteration")
    ax2.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
