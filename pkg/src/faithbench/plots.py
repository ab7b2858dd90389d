"""Report figures. Everything renders off-screen to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
}
# PNG metadata would otherwise embed the matplotlib version string
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def training_curve(log: list, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7, 2.8))
        epochs = [e["epoch"] + 1 for e in log]
        for key in sorted(log[0]["loss"]) if log else []:
            a.plot(epochs, [e["loss"][key] for e in log], marker="o", label=key)
        a.set_xlabel("epoch")
        a.set_ylabel("mean loss")
        a.set_yscale("symlog", linthresh=1e-3)
        a.legend()
        b.plot(epochs, [e["dev_macro_f1"] for e in log], marker="o", color="k")
        b.set_xlabel("epoch")
        b.set_ylabel("dev macro F1")
        b.set_ylim(0, 1.02)
        return _save(fig, path)


def faithfulness_bars(report_json: dict, path) -> Path:
    """Per-bin sufficiency and comprehensiveness, one line per method."""
    bins = report_json["bins"]
    methods = report_json["methods"]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7, 2.8), sharey=True)
        for ax, metric in zip(axes, ("sufficiency", "comprehensiveness")):
            for name, block in methods.items():
                ys = [block["bins"][f"{b:g}"][metric] for b in bins]
                ax.plot([100 * b for b in bins], ys, marker="o", label=f"{name} ({block['aopc'][metric]:.3f})")
            ax.set_xscale("log")
            ax.set_xlabel("rationale length (% of tokens)")
            ax.set_title(metric)
            ax.set_ylim(-0.02, 1.02)
        axes[0].set_ylabel("normalised score")
        axes[1].legend(fontsize=7)
        return _save(fig, path)


def consistency_heatmap(names, matrix, path, title: str = "Jaccard") -> Path:
    m = np.asarray(matrix)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(names), 0.8 + 0.7 * len(names)))
        im = ax.imshow(m, vmin=0, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_yticks(range(len(names)), names)
        for i in range(len(names)):
            for j in range(len(names)):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center",
                        color="w" if m[i, j] < 0.6 else "k", fontsize=7)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)


def fresh_bars(results, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        labels = [f"{r.method}\nk={r.k:g}" for r in results]
        ax.bar(range(len(results)), [r.rationale_f1 for r in results], color="tab:blue", label="rationale only")
        if results:
            ax.axhline(results[0].full_text_f1, color="k", ls="--", lw=1, label="full text")
        ax.set_xticks(range(len(results)), labels)
        ax.set_ylabel("test macro F1")
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=7)
        return _save(fig, path)


def sweep_lines(rows: list, sweep: str, path) -> Path:
    """``rows`` hold value, method, suff, comp as produced by the ablation runner."""
    methods = sorted({r["method"] for r in rows})
    values = list(dict.fromkeys(r["value"] for r in rows))
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7, 2.8), sharey=True)
        for ax, metric in zip(axes, ("suff", "comp")):
            for m in methods:
                ys = [next(r[metric] for r in rows if r["method"] == m and r["value"] == v) for v in values]
                ax.plot(range(len(values)), ys, marker="o", label=m)
            ax.set_xticks(range(len(values)), [str(v) for v in values], rotation=30)
            ax.set_xlabel(sweep)
            ax.set_title("AOPC " + metric)
        axes[1].legend(fontsize=7)
        return _save(fig, path)
