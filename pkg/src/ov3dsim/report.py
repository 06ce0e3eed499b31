"""Report generation from round logs: category-distribution table, metric
curves, and rendered figures.

CSV files carry the numbers; PNG figures are rendered next to them with a
headless matplotlib backend.
"""

from __future__ import annotations

import csv
import glob
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

METRIC_KEYS = ["ap_novel", "ap_base", "ap_mean", "ar_novel", "ar_base", "ar_mean",
               "f1_novel", "f1_base", "f1_mean"]


def load_round_logs(logs_dir: str) -> list[dict]:
    paths = sorted(glob.glob(os.path.join(logs_dir, "round_*.json")))
    if not paths:
        raise FileNotFoundError(f"no round_*.json files under {logs_dir}")
    logs = []
    for p in paths:
        with open(p) as f:
            logs.append(json.load(f))
    return logs


def cumulative_category_counts(logs: list[dict]) -> tuple[list[str], np.ndarray]:
    """Per-category discovery counts accumulated over rounds, shape (C, R)."""
    names = sorted({n for log in logs for n in log["discovered_per_category"]})
    table = np.zeros((len(names), len(logs)), dtype=int)
    for r, log in enumerate(logs):
        for i, n in enumerate(names):
            table[i, r] = log["discovered_per_category"].get(n, 0)
    return names, np.cumsum(table, axis=1)


def tail_share(cumulative: np.ndarray, round_index: int, tail_fraction: float = 0.3,
               reference_round: int = 0) -> float:
    """Share of discoveries in the bottom tail_fraction of categories.

    Tail membership is fixed by the counts at reference_round (ties break
    on category index), then the share is read off at round_index.
    """
    c = cumulative.shape[0]
    n_tail = max(int(round(c * tail_fraction)), 1)
    ref = cumulative[:, reference_round]
    tail_ids = sorted(range(c), key=lambda i: (ref[i], i))[:n_tail]
    total = cumulative[:, round_index].sum()
    if total == 0:
        return 0.0
    return float(cumulative[tail_ids, round_index].sum() / total)


def write_category_distribution(logs: list[dict], out_dir: str) -> str:
    names, cum = cumulative_category_counts(logs)
    path = os.path.join(out_dir, "category_distribution.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["category"] + [f"round_{r}" for r in range(cum.shape[1])])
        for i, n in enumerate(names):
            w.writerow([n] + cum[i].tolist())
        w.writerow([])
        w.writerow(["tail_share_per_round"]
                   + [tail_share(cum, r) for r in range(cum.shape[1])])
    return path


def write_metric_curves(logs: list[dict], out_dir: str) -> str:
    path = os.path.join(out_dir, "metric_curves.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "label_pool_size", "data_pool_size",
                    "distill", "contrastive", "detector"] + METRIC_KEYS)
        for log in logs:
            agg = log["metrics"]["aggregates"]
            w.writerow(
                [log["round_index"], log["label_pool_size"], log["data_pool_size"],
                 log["losses"]["distill"], log["losses"]["contrastive"],
                 log["losses"]["detector"]]
                + [agg[k] for k in METRIC_KEYS]
            )
    return path


def render_category_figure(logs: list[dict], out_dir: str) -> str:
    names, cum = cumulative_category_counts(logs)
    first, last = cum[:, 0], cum[:, -1]
    order = np.argsort(-last)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, len(names) * 0.45), 4))
    ax.bar(x - 0.2, first[order], width=0.4, label="round 1", color="#8da0cb")
    ax.bar(x + 0.2, last[order], width=0.4, label=f"round {cum.shape[1]}",
           color="#fc8d62")
    ax.set_xticks(x)
    ax.set_xticklabels([names[i] for i in order], rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("cumulative discoveries")
    ax.set_title("Discovered objects per category")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "category_distribution.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_metric_figure(logs: list[dict], out_dir: str) -> str:
    rounds = [log["round_index"] for log in logs]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key, style in (("ap_novel", "-o"), ("ar_novel", "-s"), ("ap_mean", "--")):
        axes[0].plot(rounds, [log["metrics"]["aggregates"][key] for log in logs],
                     style, label=key)
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("metric")
    axes[0].set_title("Discovery metrics vs hidden truth")
    axes[0].legend()
    axes[1].plot(rounds, [log["label_pool_size"] for log in logs], "-o",
                 label="label pool")
    axes[1].plot(rounds, [log["data_pool_size"] for log in logs], "-s",
                 label="data pool")
    axes[1].set_xlabel("round")
    axes[1].set_ylabel("entries")
    axes[1].set_title("Pool growth")
    axes[1].legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "metric_curves.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def generate_report(logs_dir: str, out_dir: str | None = None) -> list[str]:
    """Emit the CSV tables and PNG figures; returns the written paths."""
    out_dir = out_dir or logs_dir
    os.makedirs(out_dir, exist_ok=True)
    logs = load_round_logs(logs_dir)
    return [
        write_category_distribution(logs, out_dir),
        write_metric_curves(logs, out_dir),
        render_category_figure(logs, out_dir),
        render_metric_figure(logs, out_dir),
    ]
