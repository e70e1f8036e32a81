"""Rendered figures and delimited outputs for training and evaluation runs.

Figures are written next to the TSV/JSON artifacts so a run directory is
self-describing: loss curves and dev-metric curves for training, per-level
accuracy bars for evaluation.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

LOSS_KEYS = ("joint", "classification", "kh_infonce", "sibling", "mlm")
DEV_KEYS = ("micro_f1", "macro_f1", "c_micro_f1", "c_macro_f1")


def write_history_tsv(epochs: list[dict], path: str) -> None:
    """One row per epoch: losses then dev metrics."""
    header = ["epoch", *("loss_" + k for k in LOSS_KEYS), *("dev_" + k for k in DEV_KEYS)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for entry in epochs:
            row = [str(entry["epoch"])]
            row += [repr(entry["loss"][k]) for k in LOSS_KEYS]
            row += [repr(entry["dev"][k]) for k in DEV_KEYS]
            fh.write("\t".join(row) + "\n")


def write_report(report: dict, out_dir: str, stem: str) -> None:
    """report.json plus a flat metric\tvalue TSV."""
    with open(os.path.join(out_dir, stem + ".json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, stem + ".tsv"), "w", encoding="utf-8") as fh:
        fh.write("metric\tvalue\n")
        for key in DEV_KEYS:
            fh.write(f"{key}\t{report[key]!r}\n")
        for level, value in sorted(report["level_acc"].items(), key=lambda kv: int(kv[0])):
            fh.write(f"level_acc_{level}\t{value!r}\n")


def save_loss_curves(epochs: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [e["epoch"] for e in epochs]
    for key in LOSS_KEYS:
        ax.plot(xs, [e["loss"][key] for e in epochs], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title("training loss components")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_dev_curves(epochs: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [e["epoch"] for e in epochs]
    for key in DEV_KEYS:
        ax.plot(xs, [e["dev"][key] for e in epochs], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    ax.set_title("dev metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_level_accuracy_bar(report: dict, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    levels = sorted(report["level_acc"], key=int)
    values = [report["level_acc"][l] for l in levels]
    ax.bar([f"level {l}" for l in levels], values, color="#4878a8")
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title("per-level accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_run_figures(epochs: list[dict], report: dict | None, out_dir: str) -> None:
    if epochs:
        save_loss_curves(epochs, os.path.join(out_dir, "loss_curves.png"))
        save_dev_curves(epochs, os.path.join(out_dir, "dev_metrics.png"))
    if report is not None:
        save_level_accuracy_bar(report, os.path.join(out_dir, "test_level_accuracy.png"))
