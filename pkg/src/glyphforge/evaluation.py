"""Glyph comparison metrics, step-count studies and figure-style grids."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from .dataset import GlyphBitmap
from .diffusion import NoiseSchedule
from .errors import DataIOError, RaggedRows, ShapeMismatch, ValidationError
from .sampling import SamplerConfig, sample_many

INK_THRESHOLD = 0.5


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, GlyphBitmap) else np.asarray(x, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ShapeMismatch(f"cannot compare {pa.shape} with {pb.shape}")
    return pa, pb


def pixel_match(a, b, threshold: float = INK_THRESHOLD) -> float:
    """Fraction of pixels on which the two glyphs agree after binarizing at ``threshold``."""
    pa, pb = _pair(a, b)
    return float(((pa < threshold) == (pb < threshold)).mean())


def grayscale_mae(a, b) -> float:
    pa, pb = _pair(a, b)
    return float(np.abs(pa - pb).mean())


def diff_map(a, b) -> GlyphBitmap:
    pa, pb = _pair(a, b)
    return GlyphBitmap(np.abs(pa - pb))


@dataclass
class MatchReport:
    scores: list[float]
    metric_name: str = "pixel_match"
    mean: float = field(init=False)
    count: int = field(init=False)

    def __post_init__(self):
        if any(not (0.0 <= s <= 1.0) for s in self.scores):
            raise ValidationError("match scores must lie in [0, 1]")
        self.count = len(self.scores)
        self.mean = float(np.mean(self.scores)) if self.scores else float("nan")


def match_report(generated: Sequence, targets: Sequence) -> MatchReport:
    if len(generated) != len(targets):
        raise ShapeMismatch(f"{len(generated)} generated glyphs vs {len(targets)} targets")
    return MatchReport([pixel_match(g, t) for g, t in zip(generated, targets)])


@dataclass
class StudyRow:
    steps: int
    mean_match: float
    mean_mae: float


def step_study(
    net,
    references: Sequence,
    style: torch.Tensor,
    steps_list: Sequence[int],
    schedule: NoiseSchedule,
    seed: int = 0,
    baseline_steps: int | None = None,
    variance_mode: str = "beta_tilde",
    csv_path: str | os.PathLike | None = None,
    grid_path: str | os.PathLike | None = None,
) -> tuple[list[StudyRow], dict[int, list[GlyphBitmap]]]:
    """Compare samples at each step budget against a long-run baseline.

    Every reference is sampled with the study seed at every budget; the
    baseline uses ``min(1000, T)`` steps unless given. Rows keep the order of
    ``steps_list``.
    """
    if not steps_list:
        raise ValidationError("steps_list must not be empty")
    if baseline_steps is None:
        baseline_steps = min(1000, schedule.T)
    for s in list(steps_list) + [baseline_steps]:
        SamplerConfig(steps=s).validate(schedule.T)
    seeds = [seed] * len(references)

    def run(steps: int) -> list[GlyphBitmap]:
        cfg = SamplerConfig(steps=steps, variance_mode=variance_mode, seed=seed)
        return sample_many(net, references, style, cfg, schedule, seeds=seeds)

    outputs: dict[int, list[GlyphBitmap]] = {baseline_steps: run(baseline_steps)}
    baseline = outputs[baseline_steps]
    rows = []
    for steps in steps_list:
        if steps not in outputs:
            outputs[steps] = run(steps)
        gen = outputs[steps]
        rows.append(StudyRow(
            steps=int(steps),
            mean_match=float(np.mean([pixel_match(g, b) for g, b in zip(gen, baseline)])),
            mean_mae=float(np.mean([grayscale_mae(g, b) for g, b in zip(gen, baseline)])),
        ))
    if csv_path is not None:
        write_study_csv(rows, csv_path)
    if grid_path is not None:
        grid = [[outputs[s][i] for s in steps_list] for i in range(len(references))]
        render_grid(grid, labels=[f"{s} steps" for s in steps_list], path=grid_path)
    return rows, outputs


def write_study_csv(rows: Sequence[StudyRow], path: str | os.PathLike) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["steps", "mean_pixel_match", "mean_grayscale_mae"])
            for r in rows:
                w.writerow([r.steps, f"{r.mean_match:.6f}", f"{r.mean_mae:.6f}"])
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


REFERENCE_TINT = 0.45  # ink darkness of reference cells; generated cells are full black


def render_grid(
    rows: Sequence[Sequence],
    labels: Sequence[str] | None = None,
    padding: int = 4,
    reference_columns: Sequence[int] = (),
    path: str | os.PathLike | None = None,
) -> Image.Image:
    """Compose glyphs into a grayscale grid with uniform padding around each cell.

    Cells in ``reference_columns`` are drawn in gray. Labels are stored as PNG
    text metadata so the pixel geometry stays exactly ``rows x (cell + 2 * padding)``.
    """
    rows = [list(r) for r in rows]
    if not rows or not rows[0]:
        raise RaggedRows("grid needs at least one cell")
    ncols = len(rows[0])
    if any(len(r) != ncols for r in rows):
        raise RaggedRows(f"row lengths differ: {[len(r) for r in rows]}")
    cells = [[_pixels(c) for c in r] for r in rows]
    cell = cells[0][0].shape[0]
    if any(c.shape != (cell, cell) for r in cells for c in r):
        raise ShapeMismatch("all grid cells must share one size")
    pitch = cell + 2 * padding
    canvas = np.ones((len(rows) * pitch, ncols * pitch))
    tinted = set(reference_columns)
    for i, r in enumerate(cells):
        for j, px in enumerate(r):
            if j in tinted:
                px = 1.0 - REFERENCE_TINT * (1.0 - px)
            y, x = i * pitch + padding, j * pitch + padding
            canvas[y:y + cell, x:x + cell] = px
    image = Image.fromarray(np.round(canvas * 255).astype(np.uint8), mode="L")
    if path is not None:
        info = PngImagePlugin.PngInfo()
        if labels:
            info.add_text("labels", "|".join(labels))
        try:
            image.save(path, format="PNG", pnginfo=info)
        except OSError as exc:
            raise DataIOError(f"cannot write {path}: {exc}") from exc
    return image
