"""Figure rendering for evaluation and training artifacts."""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def read_eval_report(path):
    """Parse an eval_report.csv back into fold rows, the mean row, and the
    class names recovered from the cell column headers."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cell_cols = header[4:]
    k = int(round(len(cell_cols) ** 0.5))
    if k * k != len(cell_cols):
        raise ValueError(f"{path}: expected k^2 confusion cells, got {len(cell_cols)}")
    # first k columns are n_<first ref class>_<each prediction class>
    class_names = tuple(col.split("_", 2)[2] for col in cell_cols[:k])

    def parse(row):
        matrix = np.array([float(v) for v in row[4:]]).reshape(k, k)
        return {
            "fold": row[0],
            "test_session": row[1],
            "ua": float(row[2]),
            "wa": float(row[3]),
            "matrix": matrix,
        }

    folds = [parse(r) for r in rows if r[0] != "mean"]
    mean_rows = [parse(r) for r in rows if r[0] == "mean"]
    mean = mean_rows[0] if mean_rows else None
    return folds, mean, class_names


def read_train_report(path):
    """Parse a train_report.csv into (epochs, losses, frame_accs)."""
    epochs, losses, accs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            epochs.append(int(rec["epoch"]))
            losses.append(float(rec["loss"]))
            accs.append(float(rec["frame_acc"]))
    return epochs, losses, accs


def plot_confusion(matrix, class_names, path, title="Fold-averaged confusion"):
    """Row-normalized confusion heatmap with per-cell annotations."""
    matrix = np.asarray(matrix, dtype=np.float64)
    k = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    image = ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(k), class_names)
    ax.set_yticks(range(k), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("reference")
    ax.set_title(title)
    for i in range(k):
        for j in range(k):
            color = "white" if matrix[i, j] > 0.5 else "black"
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", color=color)
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_fold_ua(fold_labels, uas, mean_ua, path):
    """Per-fold unweighted accuracy bars with the mean as a reference line."""
    fig, ax = plt.subplots(figsize=(5.6, 3.6))
    positions = np.arange(len(uas))
    ax.bar(positions, uas, color="#4878a8")
    ax.axhline(mean_ua, color="#b04040", linestyle="--", label=f"mean {mean_ua:.3f}")
    ax.set_xticks(positions, fold_labels)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("test session")
    ax.set_ylabel("UA")
    ax.set_title("Per-fold unweighted accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(epochs, losses, accs, path):
    """Loss and frame accuracy against epoch on twin axes."""
    fig, ax_loss = plt.subplots(figsize=(5.6, 3.6))
    ax_loss.plot(epochs, losses, color="#4878a8", marker="o", label="loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean frame loss")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, accs, color="#589858", marker="s", label="frame acc")
    ax_acc.set_ylabel("frame accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    lines = ax_loss.get_lines() + ax_acc.get_lines()
    ax_loss.legend(lines, [line.get_label() for line in lines], loc="center right")
    ax_loss.set_title("Training curves")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(eval_csv, train_csv, out_dir) -> list:
    """Render figures and a summary CSV next to the delimited inputs;
    returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds, mean, class_names = read_eval_report(eval_csv)
    if mean is None:
        raise ValueError(f"{eval_csv}: no mean row to summarize")
    written = []

    confusion_png = out / "confusion_mean.png"
    plot_confusion(mean["matrix"], class_names, confusion_png)
    written.append(confusion_png)

    if folds:
        ua_png = out / "fold_ua.png"
        plot_fold_ua(
            [f["test_session"] for f in folds],
            [f["ua"] for f in folds],
            mean["ua"],
            ua_png,
        )
        written.append(ua_png)

    if train_csv is not None:
        epochs, losses, accs = read_train_report(train_csv)
        curves_png = out / "training_curves.png"
        plot_training_curves(epochs, losses, accs, curves_png)
        written.append(curves_png)

    summary = out / "report_summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["mean_ua", f"{mean['ua']:.6f}"])
        writer.writerow(["mean_wa", f"{mean['wa']:.6f}"])
        writer.writerow(["num_folds", len(folds)])
        for i, name in enumerate(class_names):
            writer.writerow([f"recall_{name}", f"{mean['matrix'][i, i]:.6f}"])
    written.append(summary)
    return [str(p) for p in written]
