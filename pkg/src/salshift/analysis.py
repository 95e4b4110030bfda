"""Distribution of kept kernel positions, as S x S heat maps."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .sal import attention_mask
from .shift import ShiftTable


@dataclass
class Heatmap:
    layer_id: str
    grid: np.ndarray
    mode: str  # "kept-fraction" or "mean-mask-value"

    @property
    def s(self) -> int:
        return self.grid.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "u", "v", "value"])
            for u in range(self.s):
                for v in range(self.s):
                    writer.writerow([self.layer_id, u, v, repr(float(self.grid[u, v]))])

    def to_pgm(self, path) -> None:
        """8-bit greyscale, scaled linearly between this grid's min and max."""
        lo, hi = float(self.grid.min()), float(self.grid.max())
        scaled = np.zeros_like(self.grid) if hi == lo else (self.grid - lo) / (hi - lo)
        pixels = np.round(scaled * 255).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{self.s} {self.s}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())

    def export(self, out_dir) -> tuple:
        base = os.path.join(out_dir, f"heatmap_{self.layer_id}_{self.mode}")
        self.to_csv(base + ".csv")
        self.to_pgm(base + ".pgm")
        return base + ".csv", base + ".pgm"


def position_histogram(table: ShiftTable, layer_id: str = "0") -> Heatmap:
    """Fraction of (d, c) connections that keep each kernel position."""
    entries = table.as_pairs().reshape(-1)
    counts = np.bincount(entries, minlength=table.s * table.s).astype(np.float64)
    return Heatmap(layer_id, (counts / entries.size).reshape(table.s, table.s), "kept-fraction")


def positions_histogram(positions: np.ndarray, s: int, layer_id: str = "0") -> Heatmap:
    """Same as :func:`position_histogram` for (D, C, k) kept-position arrays."""
    flat = np.asarray(positions).reshape(-1)
    counts = np.bincount(flat, minlength=s * s).astype(np.float64)
    return Heatmap(layer_id, (counts / flat.size).reshape(s, s), "kept-fraction")


def mask_heatmap(A, t: float, layer_id: str = "0", literal_scaling: bool = False) -> Heatmap:
    """Soft mask averaged over all (d, c) slices."""
    mask = attention_mask(A, t, literal_scaling).data.astype(np.float64)
    return Heatmap(layer_id, mask.mean(axis=(0, 1)), "mean-mask-value")


def corner_bias(h: Heatmap) -> float:
    """Mean of the four corner cells minus the mean of all other cells."""
    g = np.asarray(h.grid, dtype=np.float64)
    g = g - g.flat[0]  # rebase so a constant grid scores exactly 0
    s = g.shape[0]
    if s < 3:
        raise ValueError(f"corner bias needs S >= 3, got {s}")
    corners = np.zeros_like(g, dtype=bool)
    corners[[0, 0, -1, -1], [0, -1, 0, -1]] = True
    return float(g[corners].mean() - g[~corners].mean())
