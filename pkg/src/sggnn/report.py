"""Report rendering: delimited metrics files, plain-text tables and the
matplotlib figures written alongside them.

Every report path ``P`` produces the CSV at ``P`` itself plus two siblings:
``P`` with a ``.txt`` suffix (the human-readable table) and with a ``.png``
suffix (the figure). All text output is UTF-8 with LF endings and fixed
float formatting, so repeated runs are byte-identical.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import Metrics, SweepRow
from .trainer import EpochLog

METRICS_HEADER = "method,mAP,cmc1,cmc5,cmc10,num_queries,skipped"
SWEEP_HEADER = "top_k,k,alpha,t,mAP,top1,error"
TRAIN_HEADER = "epoch,stage,lr,loss"


def _write_text(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(content, encoding="utf-8", newline="\n")


def _siblings(path: str | Path) -> tuple[Path, Path, Path]:
    p = Path(path)
    return p, p.with_suffix(p.suffix + ".txt"), p.with_suffix(p.suffix + ".png")


# ---------------------------------------------------------------------------
# per-method metrics


def metrics_csv(rows: list[tuple[str, Metrics]]) -> str:
    lines = [METRICS_HEADER]
    for method, m in rows:
        lines.append(
            f"{method},{m.mAP:.6f},{m.cmc[1]:.6f},{m.cmc[5]:.6f},{m.cmc[10]:.6f},"
            f"{m.num_queries},{m.skipped}"
        )
    return "\n".join(lines) + "\n"


def metrics_table(rows: list[tuple[str, Metrics]]) -> str:
    header = f"{'method':<14} {'mAP':>8} {'top-1':>8} {'top-5':>8} {'top-10':>8} {'queries':>8} {'skipped':>8}"
    lines = [header, "-" * len(header)]
    for method, m in rows:
        lines.append(
            f"{method:<14} {m.mAP:>8.4f} {m.cmc[1]:>8.4f} {m.cmc[5]:>8.4f} "
            f"{m.cmc[10]:>8.4f} {m.num_queries:>8} {m.skipped:>8}"
        )
    return "\n".join(lines) + "\n"


def render_metrics_figure(path: Path, rows: list[tuple[str, Metrics]]) -> None:
    methods = [method for method, _ in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    x = range(len(methods))
    ax1.bar(x, [m.mAP for _, m in rows], color="tab:blue")
    ax1.set_xticks(list(x), methods, rotation=30, ha="right")
    ax1.set_ylabel("mAP")
    ax1.set_ylim(0.0, 1.0)
    for k, color in zip((1, 5, 10), ("tab:orange", "tab:green", "tab:red")):
        ax2.plot(x, [m.cmc[k] for _, m in rows], marker="o", label=f"top-{k}", color=color)
    ax2.set_xticks(list(x), methods, rotation=30, ha="right")
    ax2.set_ylabel("CMC accuracy")
    ax2.set_ylim(0.0, 1.05)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_report(path: str | Path, rows: list[tuple[str, Metrics]]) -> None:
    csv_path, txt_path, png_path = _siblings(path)
    _write_text(csv_path, metrics_csv(rows))
    _write_text(txt_path, metrics_table(rows))
    render_metrics_figure(png_path, rows)


# ---------------------------------------------------------------------------
# sensitivity sweep


def sweep_csv(rows: list[SweepRow]) -> str:
    lines = [SWEEP_HEADER]
    for r in rows:
        p = r.point
        if r.error is None:
            lines.append(
                f"{p.shortlist_size},{p.k},{p.alpha:g},{p.iterations},{r.mAP:.6f},{r.top1:.6f},"
            )
        else:
            lines.append(f"{p.shortlist_size},{p.k},{p.alpha:g},{p.iterations},,,{r.error}")
    return "\n".join(lines) + "\n"


def sweep_table(rows: list[SweepRow]) -> str:
    header = f"{'top-K':>6} {'K':>3} {'alpha':>6} {'t':>3} {'mAP':>8} {'top-1':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        p = r.point
        if r.error is None:
            lines.append(
                f"{p.shortlist_size:>6} {p.k:>3} {p.alpha:>6g} {p.iterations:>3} "
                f"{r.mAP:>8.4f} {r.top1:>8.4f}"
            )
        else:
            lines.append(
                f"{p.shortlist_size:>6} {p.k:>3} {p.alpha:>6g} {p.iterations:>3} "
                f"ERROR: {r.error}"
            )
    return "\n".join(lines) + "\n"


def render_sweep_figure(path: Path, rows: list[SweepRow]) -> None:
    ok = [r for r in rows if r.error is None]
    fig, ax = plt.subplots(figsize=(8, 3.5))
    x = range(len(ok))
    labels = [
        f"top{r.point.shortlist_size}/K{r.point.k}/a{r.point.alpha:g}/t{r.point.iterations}"
        for r in ok
    ]
    ax.plot(x, [r.mAP for r in ok], marker="o", label="mAP")
    ax.plot(x, [r.top1 for r in ok], marker="s", label="top-1")
    ax.set_xticks(list(x), labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_sweep_report(path: str | Path, rows: list[SweepRow]) -> None:
    csv_path, txt_path, png_path = _siblings(path)
    _write_text(csv_path, sweep_csv(rows))
    _write_text(txt_path, sweep_table(rows))
    render_sweep_figure(png_path, rows)


# ---------------------------------------------------------------------------
# training log


def train_log_csv(curve: list[EpochLog]) -> str:
    lines = [TRAIN_HEADER]
    for row in curve:
        lines.append(f"{row.epoch},{row.stage},{row.lr:g},{row.loss:.6f}")
    return "\n".join(lines) + "\n"


def render_train_figure(path: Path, curve: list[EpochLog]) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for stage, color in ((1, "tab:blue"), (2, "tab:orange")):
        rows = [r for r in curve if r.stage == stage]
        if rows:
            ax.plot([r.epoch for r in rows], [r.loss for r in rows], color=color,
                    label=f"stage {stage}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean pair BCE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_train_log(path: str | Path, curve: list[EpochLog]) -> None:
    csv_path, _, png_path = _siblings(path)
    _write_text(csv_path, train_log_csv(curve))
    render_train_figure(png_path, curve)
