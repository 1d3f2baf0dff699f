"""Bin-curve and disparity-histogram reports.

For each input image the report writes the representative bin values of all
four decoder scales and histograms of the predicted disparity (and of the
ground-truth disparity when depth is available) as CSV, and renders the
matching line/bar figures with matplotlib to SVG next to the delimited
output.  SVG keeps the artifacts diffable; figure metadata that would change
between runs (dates, random hash salts) is pinned.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "addv-report"
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .datagen import Triplet
from .diffcore import Tensor
from .geometry import depth_to_disp, disp_to_depth
from .nets import DepthNet

logger = logging.getLogger(__name__)

_SAVE_KW = {"metadata": {"Date": None}, "format": "svg"}


def _histogram(disp: np.ndarray, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(disp, 0.0, 1.0), bins=edges)
    return counts, edges


def image_report(
    depth_net: DepthNet,
    name: str,
    image: np.ndarray,
    gt_depth: np.ndarray | None,
    out_dir: Path,
    render_figures: bool = True,
) -> list[Path]:
    """Write the CSVs (and figures) for one image; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outs = depth_net.forward(Tensor(image))
    written = []

    bins_path = out_dir / f"{name}_bins.csv"
    with open(bins_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "index", "value"])
        for s, (_disp, _pv, bins) in enumerate(outs):
            for i, v in enumerate(bins.numpy(), start=1):
                writer.writerow([s, i, repr(float(v))])
    written.append(bins_path)

    disp = outs[0][0].data
    pred_counts, edges = _histogram(disp, depth_net.n_bins)
    gt_counts = None
    if gt_depth is not None:
        # Ground truth lives at scene scale; align its median to the
        # prediction before converting to normalized disparity so the two
        # histograms share an axis.
        pred_depth = disp_to_depth(Tensor(disp)).data
        scale = np.median(pred_depth) / np.median(gt_depth)
        gt_disp = depth_to_disp(np.clip(gt_depth * scale, 1e-3, None))
        gt_counts, _ = _histogram(gt_disp, depth_net.n_bins)

    hist_path = out_dir / f"{name}_disp_hist.csv"
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "predicted", "gt"])
        for i in range(len(pred_counts)):
            row = [repr(float(edges[i])), repr(float(edges[i + 1])), int(pred_counts[i])]
            row.append(int(gt_counts[i]) if gt_counts is not None else "")
            writer.writerow(row)
    written.append(hist_path)

    if render_figures:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for s, (_d, _p, bins) in enumerate(outs):
            vals = bins.numpy()
            ax.plot(np.arange(1, len(vals) + 1), vals, label=f"scale 1/{2 ** s}")
        ax.set_xlabel("bin index")
        ax.set_ylabel("representative disparity")
        ax.set_title(f"{name}: adaptive bins")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig_path = out_dir / f"{name}_bins.svg"
        fig.savefig(fig_path, **_SAVE_KW)
        plt.close(fig)
        written.append(fig_path)

        fig, ax = plt.subplots(figsize=(5, 3.2))
        centers = (edges[:-1] + edges[1:]) / 2.0
        width = 0.9 / len(pred_counts)
        ax.bar(centers, pred_counts, width=width, label="predicted", alpha=0.75)
        if gt_counts is not None:
            ax.step(centers, gt_counts, where="mid", color="k", label="ground truth")
        ax.set_xlabel("disparity")
        ax.set_ylabel("pixels")
        ax.set_title(f"{name}: disparity histogram")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig_path = out_dir / f"{name}_disp_hist.svg"
        fig.savefig(fig_path, **_SAVE_KW)
        plt.close(fig)
        written.append(fig_path)

    return written


def bins_report(
    depth_net: DepthNet,
    items: list[tuple[str, np.ndarray, np.ndarray | None]],
    out_dir,
    render_figures: bool = True,
) -> list[Path]:
    """Report over a list of (name, image, optional gt depth) items."""
    written = []
    for name, image, gt in items:
        written.extend(image_report(depth_net, name, image, gt, out_dir, render_figures))
    return written


def items_from_triplets(triplets: list[Triplet]):
    """Adapt loaded triplets to report items (center frame + ground truth)."""
    return [(t.name or f"{i:05d}", t.target, t.gt_depth) for i, t in enumerate(triplets)]
