"""Matplotlib renderings saved next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import DomainGrid


def _field_image(ax, values: np.ndarray, grid: DomainGrid, validity: np.ndarray, title: str):
    img = np.array(values[:, 0], dtype=np.float64).reshape(grid.height, grid.width)
    img = np.ma.masked_where(~validity.reshape(grid.height, grid.width), img)
    x0, y0, x1, y1 = grid.extent
    im = ax.imshow(img, origin="lower", extent=(x0, x1, y0, y1), cmap="RdBu_r", aspect="auto")
    ax.set_title(title, fontsize=9)
    return im


def save_field_figure(path: Path | str, panels, grid: DomainGrid, validity: np.ndarray) -> None:
    """panels: list of (title, (I, m) values). One row of field images."""
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 2.6), squeeze=False)
    for ax, (title, values) in zip(axes[0], panels):
        im = _field_image(ax, values, grid, validity, title)
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_kde_figure(path: Path | str, curves: dict[float, tuple[np.ndarray, np.ndarray]], xlabel: str) -> None:
    """curves: sensing ratio -> (grid, density)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for ratio in sorted(curves):
        grid, density = curves[ratio]
        ax.plot(grid, density, label=f"{100 * ratio:g}%")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.legend(title="input ratio", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_ratio_summary_figure(path: Path | str, ratios, means, stds) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.errorbar([100 * r for r in ratios], means, yerr=stds, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("input ratio (%)")
    ax.set_ylabel("RMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_history_figure(path: Path | str, history_rows: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    epochs = [row["epoch"] for row in history_rows]
    ax.plot(epochs, [row["loss"] for row in history_rows], label="train loss")
    if history_rows and "val_rmse" in history_rows[0]:
        ax2 = ax.twinx()
        ax2.plot(epochs, [row["val_rmse"] for row in history_rows], color="C1", label="val RMSE")
        ax2.set_ylabel("val RMSE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
