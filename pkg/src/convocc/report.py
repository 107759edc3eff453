"""Training-curve figure and CSV from a run's JSON-lines log."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_log(path) -> tuple[list[dict], list[dict]]:
    steps, vals = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        (vals if "val_iou" in rec else steps).append(rec)
    return steps, vals


def write_csv(path, steps: list[dict], vals: list[dict]) -> None:
    iou = {r["step"]: r["val_iou"] for r in vals}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "val_iou"])
        for r in steps:
            v = iou.get(r["step"])
            w.writerow([r["step"], repr(r["loss"]), repr(r["lr"]), "" if v is None else repr(v)])


def plot_curves(path, runs: dict[str, tuple[list[dict], list[dict]]]) -> None:
    """Loss and validation IoU against step, one line per run label."""
    fig, (ax_loss, ax_iou) = plt.subplots(1, 2, figsize=(10, 4))
    for label, (steps, vals) in runs.items():
        ax_loss.plot([r["step"] for r in steps], [r["loss"] for r in steps], label=label, lw=1)
        if vals:
            ax_iou.plot([r["step"] for r in vals], [r["val_iou"] for r in vals], marker="o", ms=3, label=label)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("BCE loss")
    ax_loss.set_yscale("log")
    ax_iou.set_xlabel("step")
    ax_iou.set_ylabel("validation IoU")
    ax_iou.set_ylim(0, 1)
    for ax in (ax_loss, ax_iou):
        ax.grid(alpha=0.3)
        if len(runs) > 1:
            ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def render_report(run_dirs: dict[str, Path], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    written = []
    for label, d in run_dirs.items():
        log = Path(d) / "train_log.jsonl"
        if not log.exists():
            raise FileNotFoundError(f"training log not found: {log}")
        runs[label] = read_log(log)
        csv_path = out / f"{label}_curve.csv"
        write_csv(csv_path, *runs[label])
        written.append(csv_path)
    fig = out / "training_curves.png"
    plot_curves(fig, runs)
    written.append(fig)
    return written
