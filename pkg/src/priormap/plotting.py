"""Matplotlib figures for the report path (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .grid import GridSpec  # noqa: E402
from .render import PALETTE, colorize  # noqa: E402

LOG_NAMES = ("baseline", "fusion", "mae", "finetune")


def training_curves(workdir, out_path) -> Path | None:
    """Loss and training mIoU per epoch for every stage that has a log."""
    from .pipeline import read_log

    logs = {n: read_log(p) for n in LOG_NAMES
            if (p := Path(workdir) / "logs" / f"{n}.csv").exists() and p.stat().st_size}
    if not logs:
        return None
    fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, rows in logs.items():
        ep = [r["epoch"] for r in rows]
        ax_l.plot(ep, [r["loss"] for r in rows], label=name)
        ax_m.plot(ep, [r["miou"] for r in rows], label=name)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("cross-entropy")
    ax_m.set_xlabel("epoch")
    ax_m.set_ylabel("train mIoU")
    ax_m.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def qualitative_panel(samples, logits_by: dict, out_path, count: int = 3) -> Path:
    """Rows of scenes; columns observation, GT and each model's prediction."""
    count = min(count, len(samples))
    cols = ["observation", "ground truth", *logits_by]
    fig, axes = plt.subplots(count, len(cols), figsize=(2.6 * len(cols), 1.6 * count),
                             squeeze=False)
    for r in range(count):
        s = samples[r]
        images = [colorize(s.obs), colorize(s.gt)]
        images += [colorize(np.argmax(lg[r], axis=-1)) for lg in logits_by.values()]
        for c, img in enumerate(images):
            ax = axes[r][c]
            ax.imshow(img, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(cols[c], fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def write_figures(workdir, samples, logits_by: dict, grid: GridSpec) -> list[Path]:
    out = Path(workdir) / "eval" / "figures"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    curve = training_curves(workdir, out / "training_curves.png")
    if curve is not None:
        paths.append(curve)
    if samples:
        paths.append(qualitative_panel(samples, logits_by, out / "qualitative.png"))
    return paths


__all__ = ["PALETTE", "qualitative_panel", "training_curves", "write_figures"]
