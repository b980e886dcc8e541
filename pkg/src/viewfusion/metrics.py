"""Overlap and surface-distance metrics for label volumes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class StructureReport:
    label: int
    dsc: float
    asd: float
    n_pred: int
    n_gt: int
    n_intersect: int

    @property
    def asd_defined(self):
        return not math.isnan(self.asd)

    def as_row(self):
        """Tab-separated ``label, dsc_percent, asd_mm, n_pred, n_gt, n_intersect``."""
        return (
            f"{self.label}\t{self.dsc:.6g}\t{self.asd:.6g}\t"
            f"{self.n_pred}\t{self.n_gt}\t{self.n_intersect}"
        )


def _masks(pred, gt, label):
    pred.check_geometry(gt, "prediction and ground truth")
    return pred.labels == label, gt.labels == label


def dsc(pred, gt, label):
    """Dice-Sorensen coefficient of one label, in percent.

    Both masks empty gives 100; exactly one empty gives 0.
    """
    a, b = _masks(pred, gt, label)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(a, b).sum()) / (na + nb)


def boundary(mask):
    """Foreground voxels with a 6-connected background or out-of-grid neighbour."""
    mask = np.asarray(mask, bool)
    inner = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~inner


def _directed(src, dst, spacing):
    # distance from every voxel to the nearest dst boundary voxel, read at src boundary voxels
    dist = ndimage.distance_transform_edt(~boundary(dst), sampling=spacing)
    return dist[boundary(src)]


def avg_surface_distance(pred, gt, label, symmetric=False):
    """Mean distance (mm) from ground-truth boundary voxels to the nearest predicted one.

    With ``symmetric`` the pred-to-gt distances are pooled in as well.
    Raises :class:`UndefinedMetricError` when either mask is empty.
    """
    a, b = _masks(pred, gt, label)
    if not a.any() or not b.any():
        raise UndefinedMetricError(f"surface distance undefined for label {label}: empty mask")
    d = _directed(b, a, pred.spacing)
    if symmetric:
        d = np.concatenate([d, _directed(a, b, pred.spacing)])
    return float(d.mean())


def evaluate(pred, gt, labels=None):
    """One :class:`StructureReport` per label, sorted by label id.

    ``labels`` defaults to every foreground label present in ``gt``. An
    undefined surface distance is reported as NaN.
    """
    pred.check_geometry(gt, "prediction and ground truth")
    if labels is None:
        labels = [int(s) for s in np.unique(gt.labels) if s != 0]
    reports = []
    for s in sorted(int(s) for s in labels):
        a, b = pred.labels == s, gt.labels == s
        try:
            asd = avg_surface_distance(pred, gt, s)
        except UndefinedMetricError:
            asd = math.nan
        reports.append(
            StructureReport(
                label=s,
                dsc=dsc(pred, gt, s),
                asd=asd,
                n_pred=int(a.sum()),
                n_gt=int(b.sum()),
                n_intersect=int(np.logical_and(a, b).sum()),
            )
        )
    return reports


def format_reports(reports):
    header = "label\tdsc_percent\tasd_mm\tn_pred\tn_gt\tn_intersect"
    return "\n".join([header] + [r.as_row() for r in reports]) + "\n"
