"""Matplotlib figure rendering for the report paths (PNG, deterministic)."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .fsio import atomic_write_bytes  # noqa: E402
from .metrics import MetricsReport  # noqa: E402

DPI = 110
_META = {"Software": None}  # strip the version text chunk for byte stability


def _save(fig, path: Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=DPI, metadata=_META)
    plt.close(fig)
    atomic_write_bytes(Path(path), buf.getvalue())


def save_metrics_figure(report: MetricsReport, path: Path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    names, values = [], []
    for name, value in (
        ("acc", report.acc),
        ("f2", report.f2),
        ("fnr", report.fnr),
        ("sem_r", report.sem_r),
        ("sem_c", report.sem_c),
        ("sen_a", report.sen_a),
    ):
        if value is not None:
            names.append(name)
            values.append(value)
    ax1.bar(names, values, color="#4878a8")
    ax1.set_ylim(0, 1)
    ax1.set_title("identification / attribution")
    ax1.tick_params(axis="x", rotation=45)
    thresholds = sorted(report.map_by_threshold)
    ax2.plot(thresholds, [report.map_by_threshold[t] for t in thresholds], marker="o", color="#a85448")
    ax2.axhline(report.map_avg, linestyle="--", linewidth=1, color="#888888")
    ax2.set_ylim(0, 1)
    ax2.set_xlabel("IoU threshold")
    ax2.set_title("localization mAP")
    fig.tight_layout()
    _save(fig, path)


def save_training_curves(records: list[dict], path: Path) -> None:
    steps = [r for r in records if r.get("stage") == 2 and "step" in r]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    if steps:
        xs = [r["step"] for r in steps]
        ax1.plot(xs, [r["l_task"] for r in steps], label="task loss", color="#4878a8")
        ax1.plot(xs, [r["l_rb"] for r in steps], label="router loss", color="#a85448")
        ax1.set_xlabel("step")
        ax1.legend()
        ax1.set_title("losses")
        gates = list(zip(*(r["gate_mean"] for r in steps)))
        for i, series in enumerate(gates):
            ax2.plot(xs, series, label=f"expert {i}")
        ax2.plot(xs, [r["gate_entropy"] for r in steps], linestyle="--", color="#444444", label="gate entropy")
        ax2.set_xlabel("step")
        ax2.legend(fontsize=7)
        ax2.set_title("routing")
    fig.tight_layout()
    _save(fig, path)


def save_ablation_figure(rows: list[dict], path: Path) -> None:
    """Grouped bars: mean accuracy (and mAP avg) per ablation arm."""
    arms = sorted({r["ablation"] for r in rows}, key=lambda a: ("full", "no_iec", "no_sbm", "no_scene_tuning").index(a) if a in ("full", "no_iec", "no_sbm", "no_scene_tuning") else 99)
    acc_means, map_means = [], []
    for arm in arms:
        cells = [r for r in rows if r["ablation"] == arm]
        acc_means.append(sum(c["acc"] for c in cells) / len(cells))
        map_means.append(sum(c["map_avg"] for c in cells) / len(cells))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = range(len(arms))
    ax.bar([i - 0.2 for i in x], acc_means, width=0.4, label="accuracy", color="#4878a8")
    ax.bar([i + 0.2 for i in x], map_means, width=0.4, label="mAP avg", color="#a85448")
    ax.set_xticks(list(x))
    ax.set_xticklabels(arms, rotation=20)
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title("ablation sweep (means over seeds)")
    fig.tight_layout()
    _save(fig, path)
