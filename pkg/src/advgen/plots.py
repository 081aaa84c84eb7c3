"""Figure rendering for run and sweep reports.

All figures land as PNG files next to the metrics CSV. Rendering is
data-driven from a manifest dict: charts whose inputs are missing are
skipped with a warning instead of failing the report.
"""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.image as mpimage
import matplotlib.pyplot as plt
import numpy as np

RATE_LABEL = "raw misclassification rate (%)"


def save_image_png(path, image: np.ndarray) -> None:
    """Persist an H x W x C float image in [0, 1] as 8-bit PNG. Quantization
    happens only here; metrics always run on the full-precision arrays."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        mpimage.imsave(path, image, cmap="gray", vmin=0.0, vmax=1.0)
    else:
        mpimage.imsave(path, image)


def save_gallery(path, benign: np.ndarray, adversarial: np.ndarray) -> None:
    """Three-panel review strip: benign | perturbation x10 | adversarial.

    The middle panel shows 0.5 + 10 * (adversarial - benign), clipped, so a
    reviewer can see where the perturbation lives."""
    perturbation = np.clip(0.5 + 10.0 * (np.asarray(adversarial) - np.asarray(benign)), 0.0, 1.0)
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    for ax, img, title in zip(
        axes, (benign, perturbation, adversarial), ("benign", "perturbation x10", "adversarial")
    ):
        img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        if img.ndim == 3 and img.shape[2] == 1:
            img = img[:, :, 0]
        ax.imshow(img, vmin=0.0, vmax=1.0, cmap="gray" if img.ndim == 2 else None)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def series_by_mu(rows: list[dict]) -> dict[float, tuple[list[float], list[float]]]:
    """Group metric rows into rate-vs-epsilon series, one per mu."""
    series: dict[float, tuple[list[float], list[float]]] = {}
    for r in sorted(rows, key=lambda r: (r["mu"], r["epsilon"])):
        xs, ys = series.setdefault(r["mu"], ([], []))
        xs.append(r["epsilon"])
        ys.append(r["rate"])
    return series


def series_by_epsilon(rows: list[dict]) -> dict[float, tuple[list[float], list[float]]]:
    """Group metric rows into rate-vs-mu series, one per epsilon."""
    series: dict[float, tuple[list[float], list[float]]] = {}
    for r in sorted(rows, key=lambda r: (r["epsilon"], r["mu"])):
        xs, ys = series.setdefault(r["epsilon"], ([], []))
        xs.append(r["mu"])
        ys.append(r["rate"])
    return series


def _rate_bar_chart(rows, labels, path):
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    rates = [r["rate"] for r in rows]
    ax.bar(range(len(rates)), rates, color="tab:blue", width=0.6)
    ax.set_xticks(range(len(rates)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(RATE_LABEL)
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _rate_line_chart(series, xlabel, legend_fmt, path):
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    for key, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker="o", markersize=3.5, label=legend_fmt.format(key))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(RATE_LABEL)
    ax.set_ylim(-2, 102)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _confidence_chart(buckets, path):
    edges = [i / 10 for i in range(10)]
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.bar(edges, buckets, width=0.095, align="edge", color="tab:orange")
    ax.set_xlabel("adversarial prediction confidence")
    ax.set_ylabel("successful attacks")
    ax.set_xlim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _mse_curves(curves, path):
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, marker=".", markersize=3, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean MSE vs benign image")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def mse_curves_from_traces(trace_files: list[Path]) -> dict[str, tuple[list[int], list[float]]]:
    """Average the per-iteration MSE column of instance trace CSVs, one curve
    per phase. Embedding steps and refinement iterations are plotted on one
    axis, with refinement offset to continue after the embedding phase."""
    sums: dict[tuple[str, int], list[float]] = {}
    for path in trace_files:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if not row.get("mse"):
                    continue
                key = (row["phase"], int(row["iteration"]))
                sums.setdefault(key, []).append(float(row["mse"]))
    if not sums:
        return {}
    curves: dict[str, tuple[list[int], list[float]]] = {}
    embed_len = max((it for ph, it in sums if ph == "embed"), default=0)
    for phase, label in (("embed", "embedding phase"), ("refine", "refinement phase")):
        items = sorted((it, float(np.mean(vals))) for (ph, it), vals in sums.items() if ph == phase)
        if not items:
            continue
        offset = embed_len if phase == "refine" else 0
        curves[label] = ([it + offset for it, _ in items], [v for _, v in items])
    return curves


def emit_plots(manifest: dict, out_dir) -> list[str]:
    """Render every figure the manifest's data supports; returns the paths.

    Emits a per-mode rate bar chart, rate-vs-epsilon and rate-vs-mu line
    charts when the grid varies along those axes, the confidence decile
    histogram, and the per-iteration MSE curve when instance traces exist.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = manifest.get("metrics", [])
    if not rows:
        warnings.warn("manifest has no metrics rows; no plots emitted", stacklevel=2)
        return []
    written: list[str] = []

    mode = manifest.get("config", {}).get("mode", "full")
    if len(rows) == 1:
        labels = [mode]
    else:
        labels = [f"eps={r['epsilon']:g}, mu={r['mu']:g}" for r in rows]
    path = out_dir / "rate_by_mode.png"
    _rate_bar_chart(rows, labels, path)
    written.append(str(path))

    if len({r["epsilon"] for r in rows}) > 1:
        path = out_dir / "rate_vs_epsilon.png"
        _rate_line_chart(series_by_mu(rows), "epsilon (L-inf radius)", "mu={0:g}", path)
        written.append(str(path))
    if len({r["mu"] for r in rows}) > 1:
        path = out_dir / "rate_vs_mu.png"
        _rate_line_chart(series_by_epsilon(rows), "momentum decay mu", "eps={0:g}", path)
        written.append(str(path))

    buckets = np.sum([r["buckets"] for r in rows], axis=0)
    path = out_dir / "confidence_histogram.png"
    _confidence_chart(buckets, path)
    written.append(str(path))

    trace_files = [
        Path(rec["artifacts"]["trace_csv"])
        for rec in manifest.get("instances", [])
        if rec.get("artifacts", {}).get("trace_csv")
    ]
    curves = mse_curves_from_traces([p for p in trace_files if p.exists()])
    if curves:
        path = out_dir / "mse_vs_iteration.png"
        _mse_curves(curves, path)
        written.append(str(path))
    elif trace_files:
        warnings.warn("instance traces listed in manifest are missing; MSE curve skipped",
                      stacklevel=2)

    return written
