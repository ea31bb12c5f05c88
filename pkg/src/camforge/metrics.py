"""Explanation-quality and predictive metrics over cell-tiled overlays."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .model import forward


@dataclass(frozen=True)
class GroundTruth:
    mask: np.ndarray  # (H, W) of 0/1, the exact lesion support
    boxes: tuple = ()  # half-open (row0, col0, row1, col1)

    def __post_init__(self):
        h, w = self.mask.shape
        for r0, c0, r1, c1 in self.boxes:
            if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                raise ValueError(f"box {(r0, c0, r1, c1)} outside a {h}x{w} image")

    def box_mask(self):
        m = np.zeros(self.mask.shape, dtype=bool)
        for r0, c0, r1, c1 in self.boxes:
            m[r0:r1, c0:c1] = True
        return m


@dataclass(frozen=True)
class CellGrid:
    cell_h: int
    cell_w: int

    def shape_for(self, hw):
        h, w = hw
        if h % self.cell_h or w % self.cell_w:
            raise ValueError(f"{self.cell_h}x{self.cell_w} cells do not tile a {h}x{w} image")
        return h // self.cell_h, w // self.cell_w

    def count(self, hw):
        rows, cols = self.shape_for(hw)
        return rows * cols

    def cell_means(self, overlay):
        rows, cols = self.shape_for(overlay.shape)
        blocks = np.asarray(overlay, dtype=np.float64).reshape(rows, self.cell_h, cols, self.cell_w)
        return blocks.mean(axis=(1, 3))

    def cell_slices(self, cell):
        r, c = cell
        return (slice(r * self.cell_h, (r + 1) * self.cell_h),
                slice(c * self.cell_w, (c + 1) * self.cell_w))


def topk_cells(overlay, grid, k):
    """The k cells with the highest mean overlay, ties to the lowest row-major index."""
    means = grid.cell_means(overlay)
    rows, cols = means.shape
    if not 1 <= k <= rows * cols:
        raise ValueError(f"k={k} must lie in [1, {rows * cols}] for this cell grid")
    order = np.argsort(-means.ravel(), kind="stable")[:k]
    return [(int(i) // cols, int(i) % cols) for i in order]


def mask_cells(image, cells, grid, fill):
    """Copy of ``image`` (1, C, H, W) with ``cells`` replaced by per-channel ``fill``.

    ``fill="original"`` leaves pixels unchanged (a no-op mask for testing).
    """
    out = np.array(image, copy=True)
    if isinstance(fill, str) and fill == "original":
        return out
    fill = np.asarray(fill, dtype=out.dtype).reshape(-1, 1, 1)
    for cell in cells:
        rs, cs = grid.cell_slices(cell)
        out[0, :, rs, cs] = fill
    return out


def topk_sensitivity(model, image, overlay, grid, k, fill, target=None):
    """Relative drop of the target-class probability after masking the top-k cells."""
    image = T.tensor4(image)
    logits, _ = forward(model, image)
    p = T.softmax(logits[0].astype(np.float64))
    c = int(np.argmax(p)) if target is None else target
    masked = mask_cells(image, topk_cells(overlay, grid, k), grid, fill)
    logits2, _ = forward(model, masked)
    p2 = T.softmax(logits2[0].astype(np.float64))
    return float((p[c] - p2[c]) / p[c])


def topk_localization(overlay, grid, k, mask):
    """Fraction of the top-k cells that touch the lesion mask."""
    mask = np.asarray(mask) > 0
    cells = topk_cells(overlay, grid, k)
    hits = sum(bool(mask[grid.cell_slices(cell)].any()) for cell in cells)
    return hits / k


def activation_precision(overlay, box_mask, threshold=None):
    """Share of overlay mass inside the boxes; 0 when the overlay is empty.

    With ``threshold`` set, counts pixels at or above it instead of summing mass.
    """
    ov = np.asarray(overlay, dtype=np.float64)
    inside = np.asarray(box_mask) > 0
    if threshold is not None:
        ov = (ov >= threshold).astype(np.float64)
    total = ov.sum()
    if total == 0:
        return 0.0
    return float(ov[inside].sum() / total)


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return float((predictions == labels).mean())


def auc(scores, labels):
    """ROC AUC as the Mann-Whitney statistic; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)  # average ranks, halves for ties
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n0))


@dataclass(frozen=True)
class MethodRecord:
    topk_sensitivity: float
    topk_localization_mean: float
    topk_localization_sd: float
    activation_precision_mean: float
    activation_precision_sd: float
    accuracy: float
    auc: float
    k: int
    n: int

    def to_dict(self):
        return {
            "topk_sensitivity": self.topk_sensitivity,
            "topk_localization": {"mean": self.topk_localization_mean,
                                  "sd": self.topk_localization_sd},
            "activation_precision": {"mean": self.activation_precision_mean,
                                     "sd": self.activation_precision_sd},
            "accuracy": self.accuracy,
            "auc": self.auc,
            "k": self.k,
            "n": self.n,
        }


def mean_sd(values):
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty metric stream")
    return float(v.mean()), float(v.std())


def aggregate_report(streams, k):
    """Build ``{method: MethodRecord}`` from per-sample streams.

    ``streams[method]`` holds lists ``sensitivity``, ``localization`` and
    ``activation_precision`` plus scalars ``accuracy`` and ``auc``.
    Methods are emitted in sorted order.
    """
    if not streams:
        raise ValueError("no methods to aggregate")
    report = {}
    for method in sorted(streams):
        s = streams[method]
        sens, _ = mean_sd(s["sensitivity"])
        loc = mean_sd(s["localization"])
        ap = mean_sd(s["activation_precision"])
        report[method] = MethodRecord(sens, *loc, *ap, float(s["accuracy"]), float(s["auc"]),
                                      k, len(s["sensitivity"]))
    return report


def report_to_dict(report):
    return {method: rec.to_dict() for method, rec in report.items()}
