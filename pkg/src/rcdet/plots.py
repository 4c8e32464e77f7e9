"""Static report figures: per-class PR curves and the normalized confusion matrix."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import normalize_rows  # noqa: E402


def plot_pr_curves(report, path):
    fig, ax = plt.subplots(figsize=(5, 4.5), dpi=100)
    for c, pts in sorted(report.pr_samples.items()):
        name = report.class_names[c]
        ap = report.per_class[c].ap50
        if pts:
            r, p = zip(*pts)
            # draw the interpolated envelope the AP integrates
            env = np.maximum.accumulate(np.asarray(p)[::-1])[::-1]
            ax.step([0.0, *r], [env[0], *env], where="pre", label=f"{name} {ap:.3f}")
        else:
            ax.plot([], [], label=f"{name} {ap:.3f}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_title(f"PR @ IoU 0.5, mAP {report.map50:.3f}")
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_confusion(report, path):
    """Row-normalized (true class) confusion matrix including the background row and column."""
    cm = normalize_rows(report.confusion)
    names = list(report.class_names) + ["background"]
    fig, ax = plt.subplots(figsize=(5.5, 4.5), dpi=100)
    im = ax.imshow(cm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right", fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    for i in range(len(names)):
        for j in range(len(names)):
            if cm[i, j] > 0:
                ax.text(j, i, f"{cm[i, j]:.2f}", ha="center", va="center", fontsize=8,
                        color="white" if cm[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
