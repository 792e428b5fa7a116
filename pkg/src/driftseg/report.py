"""Render evaluation figures (PR curves, metric bars) to image files.

Purely optional output alongside the JSON/CSV reports; uses the Agg backend
so it works headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport  # noqa: E402


def render_figures(report: EvalReport, out_dir) -> list[str]:
    """Write pr_curves.png and metrics.png under ``out_dir``; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve, style in (("box", report.box_curve, "-"),
                               ("mask", report.mask_curve, "--")):
        if len(curve) == 2 and len(curve[0]) > 0:
            ax.plot(curve[0], curve[1], style, label=f"{name} (AP={getattr(report, name).ap50:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left")
    ax.set_title("Precision-recall at IoU 0.5")
    path = os.path.join(out_dir, "pr_curves.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    labels = ["Precision", "Recall", "mAP_0.5", "F1", "IoU"]
    box_vals = [report.box.precision, report.box.recall, report.box.ap50,
                report.box.f1, report.box.dataset_iou]
    mask_vals = [report.mask.precision, report.mask.recall, report.mask.ap50,
                 report.mask.f1, report.mask.dataset_iou]
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(labels))
    ax.bar([x - 0.2 for x in xs], box_vals, width=0.4, label="box")
    ax.bar([x + 0.2 for x in xs], mask_vals, width=0.4, label="mask")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title("Evaluation summary")
    path = os.path.join(out_dir, "metrics.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written
