"""Figure rendering for training and evaluation reports.

Figures are written next to the delimited metrics output. PNG date metadata
is suppressed so rendered files stay byte-stable across identical runs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Date": None}}

_CATEGORY_STYLE = (
    ("adv_tool_success", "cum_adv_tool_success", "tool success", "tab:orange"),
    ("adv_tool_fail", "cum_adv_tool_fail", "tool fail", "tab:red"),
    ("adv_no_tool", "cum_adv_no_tool", "no tool", "tab:blue"),
)


def _series(rows: list[dict], key: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for row in rows:
        value = row.get(key)
        if value is not None and value != "":
            xs.append(int(row["step"]))
            ys.append(float(value))
    return xs, ys


def plot_advantage_by_category(rows: list[dict], out_path: str | Path) -> Path:
    """Per-step mean advantage and its running sum for each tool-use
    category (missing categories leave gaps rather than zeros)."""
    fig, (ax_mean, ax_cum) = plt.subplots(1, 2, figsize=(10, 4))
    for mean_key, cum_key, label, color in _CATEGORY_STYLE:
        xs, ys = _series(rows, mean_key)
        if xs:
            ax_mean.plot(xs, ys, ".", markersize=2.5, color=color, label=label, alpha=0.6)
        xs, ys = _series(rows, cum_key)
        if xs:
            ax_cum.plot(xs, ys, color=color, label=label)
    ax_mean.axhline(0.0, color="gray", linewidth=0.6)
    ax_mean.set_xlabel("step")
    ax_mean.set_ylabel("mean group-relative advantage")
    ax_mean.set_title("Per-step advantage by category")
    ax_mean.legend(loc="best", fontsize=8)
    ax_cum.set_xlabel("step")
    ax_cum.set_ylabel("accumulated advantage")
    ax_cum.set_title("Accumulated advantage by category")
    ax_cum.legend(loc="best", fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_SAVE_KWARGS)
    plt.close(fig)
    return out_path


def plot_training_curves(rows: list[dict], out_path: str | Path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, keys, label in zip(
        axes,
        (("mean_reward", "reward"), ("accuracy",), ("tool_use_rate",)),
        ("mean total reward", "exact-answer accuracy", "tool-use rate"),
    ):
        xs: list[int] = []
        ys: list[float] = []
        for key in keys:
            xs, ys = _series(rows, key)
            if xs:
                break
        ax.plot(xs, ys, linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_title(label)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_SAVE_KWARGS)
    plt.close(fig)
    return out_path


def plot_lr_schedule(rows: list[dict], out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs, ys = _series(rows, "lr")
    ax.plot(xs, ys)
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    ax.set_title("Warmup + cosine decay")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_SAVE_KWARGS)
    plt.close(fig)
    return out_path


def render_training_report(rows: list[dict], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        plot_advantage_by_category(rows, out_dir / "advantage_by_category.png"),
        plot_training_curves(rows, out_dir / "training_curves.png"),
        plot_lr_schedule(rows, out_dir / "lr_schedule.png"),
    ]


def plot_eval_sweep(rows: list[dict], out_path: str | Path) -> Path:
    """Accuracy and tool rates against observation resolution."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    res = [int(r["obs_resolution"]) for r in rows]
    for key, label in (
        ("accuracy", "accuracy"),
        ("tool_use_rate", "tool-use rate"),
        ("tool_success_rate", "tool success rate"),
    ):
        ax.plot(res, [float(r[key]) for r in rows], marker="o", label=label)
    ax.set_xlabel("observation resolution (pixels per side)")
    ax.set_ylim(-0.02, 1.05)
    ax.legend(loc="best", fontsize=8)
    ax.set_title("Greedy evaluation vs. input resolution")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_SAVE_KWARGS)
    plt.close(fig)
    return out_path
