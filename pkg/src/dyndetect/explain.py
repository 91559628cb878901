"""Per-epoch local explanations of detector scores (LIME-style surrogate).

Epochs (or windows of epochs) are switched off by replacing them with the
sequence mean; a kernel-weighted linear model of the detector output on the
on/off masks gives each epoch's local importance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dyndetect.detector import DetectorModel, detector_forward
from dyndetect.errors import InvalidArgumentError

RIDGE = 1e-6


@dataclass(frozen=True)
class Explanation:
    epoch_importances: np.ndarray
    intercept: float
    fidelity: float
    ridge_fallback: bool = False
    prediction: float | None = None

    def first_half_share(self) -> float:
        """Fraction of summed |importance| carried by the first half of the epochs."""
        mag = np.abs(self.epoch_importances)
        total = mag.sum()
        if total == 0:
            return 0.5
        return float(mag[: mag.size // 2].sum() / total)

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "importance"])
            for t, v in enumerate(self.epoch_importances):
                writer.writerow([t, f"{v:.8g}"])


def default_kernel_width(input_len: int) -> float:
    return 0.75 * math.sqrt(input_len)


def sample_masks(num_segments: int, num_perturbations: int, rng: np.random.Generator) -> np.ndarray:
    """Binary keep-masks over segments; row 0 keeps everything.

    Each other row switches off a uniformly drawn number of segments
    (1..num_segments), chosen uniformly without replacement.
    """
    masks = np.ones((num_perturbations, num_segments), dtype=np.int64)
    for row in masks[1:]:
        off = rng.integers(1, num_segments + 1)
        row[rng.choice(num_segments, size=off, replace=False)] = 0
    return masks


def explain_instance(
    model: DetectorModel,
    seq,
    num_perturbations: int | None = None,
    kernel_width: float | None = None,
    seed: int = 0,
    window: int = 1,
) -> Explanation:
    seq = np.asarray(seq, dtype=np.float64)
    t_len = model.input_len
    if seq.shape != (t_len,):
        raise InvalidArgumentError(f"sequence length {seq.shape} != detector input_len {t_len}")
    if window < 1:
        raise InvalidArgumentError("window must be >= 1")
    n_seg = math.ceil(t_len / window)
    if num_perturbations is None:
        num_perturbations = max(1000, 2 * t_len)
    if num_perturbations < 2 * t_len:
        raise InvalidArgumentError(f"num_perturbations must be >= 2 * input_len = {2 * t_len}")
    if kernel_width is None:
        kernel_width = default_kernel_width(n_seg)

    rng = np.random.default_rng(seed)
    masks = sample_masks(n_seg, num_perturbations, rng)
    keep = np.repeat(masks, window, axis=1)[:, :t_len].astype(bool)
    perturbed = np.where(keep, seq, seq.mean())
    y = np.asarray(detector_forward(model, perturbed), dtype=np.float64)

    distance = (n_seg - masks.sum(axis=1)).astype(np.float64)
    weights = np.exp(-(distance**2) / kernel_width**2)
    design = np.hstack([np.ones((num_perturbations, 1)), masks.astype(np.float64)])
    coef, fallback = _weighted_lstsq(design, y, weights)

    fitted = design @ coef
    y_bar = np.sum(weights * y) / weights.sum()
    ss_tot = np.sum(weights * (y - y_bar) ** 2)
    ss_res = np.sum(weights * (y - fitted) ** 2)
    fidelity = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    # a window's coefficient is shared evenly among its epochs
    seg_sizes = np.diff(np.r_[np.arange(0, t_len, window), t_len])
    epoch_importance = np.repeat(coef[1:] / seg_sizes, seg_sizes)
    return Explanation(epoch_importance, float(coef[0]), float(fidelity), fallback, float(y[0]))


def _weighted_lstsq(design, y, weights):
    sw = weights[:, None] * design
    gram = design.T @ sw
    rhs = sw.T @ y
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        return np.linalg.solve(gram + RIDGE * np.eye(gram.shape[0]), rhs), True
    return np.linalg.solve(gram, rhs), False


def write_importance_svg(explanation: Explanation, path, title: str = "") -> None:
    from dyndetect.plots import bar_chart_svg

    bar_chart_svg(explanation.epoch_importances, path, title=title, xlabel="epoch", ylabel="importance")
