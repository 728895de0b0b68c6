"""Report artifacts: JSON, a fixed-width ablation table, CSV and matplotlib figures."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

ROW_ORDER = ("identity", "baseline", "cls", "att", "full")
MASK_ORDER = ("imask", "smask")
_FLAGS = {"baseline": ("-", "-"), "cls": ("-", "x"), "att": ("x", "-"), "full": ("x", "x"),
          "identity": ("", "")}


def _aggregate(reports) -> dict:
    """(method, mask_type) -> mean psnr/ssim/vfid over the reports (e.g. seeds)."""
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.method, r.mask_type), []).append(r)
    return {key: {"psnr": float(np.mean([r.psnr for r in rs])),
                  "ssim": float(np.mean([r.ssim for r in rs])),
                  "vfid": float(np.mean([r.vfid for r in rs])),
                  "hole_psnr": float(np.mean([r.hole_psnr for r in rs])),
                  "n": len(rs)}
            for key, rs in groups.items()}


def _ordered(keys, order):
    known = [k for k in order if k in keys]
    return known + sorted(k for k in keys if k not in order)


def ablation_table(reports) -> str:
    """Rows are method variants, columns PSNR/SSIM(x100)/VFID per mask type."""
    agg = _aggregate(reports)
    methods = _ordered({m for m, _ in agg}, ROW_ORDER)
    masks = _ordered({k for _, k in agg}, MASK_ORDER)
    head1 = f"{'method':<10} {'att':>3} {'cls':>3} |" + "|".join(f" {m:^24} " for m in masks) + "|"
    head2 = f"{'':<10} {'':>3} {'':>3} |" + "|".join(
        f" {'PSNR^':>7} {'SSIM^':>7} {'VFID_':>8} " for _ in masks) + "|"
    lines = [head1, head2, "-" * len(head2)]
    for method in methods:
        att, cls = _FLAGS.get(method, ("?", "?"))
        cells = []
        for mask in masks:
            a = agg.get((method, mask))
            cells.append(" " + (f"{a['psnr']:>7.2f} {100 * a['ssim']:>7.2f} {a['vfid']:>8.4f}"
                                if a else f"{'n/a':>24}") + " ")
        lines.append(f"{method:<10} {att:>3} {cls:>3} |" + "|".join(cells) + "|")
    return "\n".join(lines) + "\n"


def reports_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "mask_type", "extractor", "clip_id", "psnr", "ssim", "hole_psnr", "vfid"])
    for r in reports:
        for c in r.clips:
            writer.writerow([r.method, r.mask_type, r.extractor, c.clip_id,
                             f"{c.psnr:.6f}", f"{c.ssim:.6f}", f"{c.hole_psnr:.6f}", f"{r.vfid:.6f}"])
    return buf.getvalue()


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def metrics_figure(reports, path) -> Path:
    plt = _plt()
    agg = _aggregate(reports)
    methods = _ordered({m for m, _ in agg}, ROW_ORDER)
    masks = _ordered({k for _, k in agg}, MASK_ORDER)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    width = 0.8 / max(1, len(masks))
    x = np.arange(len(methods))
    for ax, key, label in zip(axes, ("psnr", "ssim", "vfid"), ("PSNR (dB)", "SSIM", "VFID")):
        for j, mask in enumerate(masks):
            vals = [agg.get((m, mask), {}).get(key, np.nan) for m in methods]
            ax.bar(x + j * width, vals, width, label=mask)
        ax.set_xticks(x + width * (len(masks) - 1) / 2, methods, rotation=30)
        ax.set_title(label)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def curves_figure(series: dict, path, title: str = "", smooth: int = 10) -> Path:
    """Line plot of named loss curves with a trailing moving average."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, values in series.items():
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            continue
        k = max(1, min(smooth, values.size))
        smoothed = np.convolve(values, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k - 1, values.size), smoothed, label=name)
    ax.set_xlabel("step")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def write_reports(directory, reports, figures: bool = True) -> dict:
    """report.json, table.txt, metrics.csv and metrics.png under `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"json": directory / "report.json", "table": directory / "table.txt",
             "csv": directory / "metrics.csv"}
    payload = {"reports": [r.to_dict() for r in reports],
               "summary": [{"method": m, "mask_type": k, **v} for (m, k), v in _aggregate(reports).items()]}
    paths["json"].write_text(json.dumps(payload, indent=2, sort_keys=True))
    paths["table"].write_text(ablation_table(reports))
    paths["csv"].write_text(reports_csv(reports))
    if figures:
        paths["figure"] = metrics_figure(reports, directory / "metrics.png")
    return paths
