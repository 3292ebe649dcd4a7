"""Report figures.  Everything renders through the Agg backend to files."""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def size(width: float = 6.0, ratio: float = GOLDEN) -> tuple[float, float]:
    return width, width * ratio


def save(fig, path) -> Path:
    """Write to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=path.suffix)
    os.close(fd)
    try:
        fmt = path.suffix.lstrip(".") or "png"
        fig.savefig(tmp, format=fmt, bbox_inches="tight", metadata={"Software": None} if fmt == "png" else None)
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def to_bytes(fig, fmt: str = "png") -> bytes:
    """Render and close; PNG metadata is pinned so identical figures give identical bytes."""
    buf = io.BytesIO()
    try:
        fig.savefig(buf, format=fmt, bbox_inches="tight", metadata={"Software": None} if fmt == "png" else None)
    finally:
        plt.close(fig)
    return buf.getvalue()


def mel_figure(mel: np.ndarray, title: str = "mel", reference: np.ndarray | None = None):
    """Frames on x, mel bins on y; optional reference panel underneath."""
    with plt.rc_context(STYLE):
        rows = 1 if reference is None else 2
        fig, axes = plt.subplots(rows, 1, figsize=size(6.0, 0.35 * rows), squeeze=False, layout="constrained")
        panels = [(mel, title)] + ([] if reference is None else [(reference, "target")])
        for ax, (m, label) in zip(axes[:, 0], panels):
            im = ax.imshow(np.asarray(m).T, origin="lower", aspect="auto", cmap="magma")
            ax.set_title(label)
            ax.set_ylabel("bin")
            fig.colorbar(im, ax=ax, pad=0.01)
        axes[-1, 0].set_xlabel("frame")
    return fig


def raster_figure(rasters: dict, max_sites: int = 6, channels: int = 16):
    """One panel per site: dots at (time-major position, channel) for item 0."""
    names = list(rasters)[:max_sites]
    with plt.rc_context(STYLE):
        rows = len(names) or 1
        fig, axes = plt.subplots(rows, 1, figsize=(6.0, 1.1 * rows + 0.4), sharex=True, squeeze=False, layout="constrained")
        for ax, name in zip(axes[:, 0], names):
            s = np.asarray(rasters[name])[:, 0, :, :channels]  # [T, L, C]
            T, L, C = s.shape
            t, l, c = np.nonzero(s)
            ax.scatter(t * L + l, c, s=14, marker="|", color="k")
            for k in range(1, T):
                ax.axvline(k * L - 0.5, color="0.7", lw=0.5)
            ax.set_xlim(-0.5, T * L - 0.5)
            ax.set_ylim(-0.5, C - 0.5)
            ax.set_ylabel("ch")
            ax.set_title(name, loc="left", fontsize=8)
        axes[-1, 0].set_xlabel("t * L + l")
    return fig


def loss_figure(steps, total, components: dict | None = None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(5.0))
        ax.plot(steps, total, color="k", lw=1.2, label="total")
        for name, vals in (components or {}).items():
            ax.plot(steps, vals, lw=0.8, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=2)
    return fig


def energy_figure(report, top: int = 20):
    """Spiking vs ANN energy for the costliest layers."""
    layers = sorted(report.layers, key=lambda l: l.ann_pj, reverse=True)[:top]
    names = [l.name for l in layers]
    y = np.arange(len(layers))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.22 * max(len(layers), 4) + 0.8), layout="constrained")
        ax.barh(y - 0.2, [l.ann_pj for l in layers], height=0.4, label="ANN (MAC)", color="0.6")
        ax.barh(y + 0.2, [l.snn_pj for l in layers], height=0.4, label="spiking (AC)", color="tab:red")
        ax.set_yticks(y, names)
        ax.invert_yaxis()
        ax.set_xscale("symlog", linthresh=1.0)
        ax.set_xlim(0, 3 * max([l.ann_pj for l in layers] + [1.0]))
        ax.set_xlabel("energy (pJ)")
        ax.set_title(f"spiking / ANN = {report.ratio:.4f}")
        ax.legend(frameon=False)
    return fig


def _row_label(section: str, site: str) -> str:
    if not site:
        return section
    return "".join(w[0] for w in section.split()) + " " + site


def firing_rate_figure(table):
    """Heatmap per rate table, rows are sites and columns layers (AVG excluded)."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(table.tables), figsize=(4.2 * len(table.tables), 4.0), squeeze=False, layout="constrained")
        for ax, t in zip(axes[0], table.tables):
            grid = np.array([vals for _, _, vals, _ in t.rows])
            im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0.0)
            ax.set_xticks(range(len(t.columns)), t.columns, rotation=45, ha="right")
            ax.set_yticks(range(len(t.rows)), [_row_label(s, site) for s, site, _, _ in t.rows])
            ax.set_title(t.title)
            fig.colorbar(im, ax=ax, pad=0.02)
    return fig


def ablation_figure(rows: list):
    """Final loss and template correlation per attention variant."""
    names = [r["attention"] for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=size(6.0, 0.4))
        ax1.bar(x, [r["final_loss"] for r in rows], color="0.5")
        ax1.set_ylabel("final loss")
        ax2.bar(x, [r["template_r"] for r in rows], color="tab:blue")
        ax2.set_ylabel("template r")
        for ax in (ax1, ax2):
            ax.set_xticks(x, names)
    return fig
