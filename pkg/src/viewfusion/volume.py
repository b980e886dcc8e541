"""Voxel-grid containers, isotropic resampling and patch extraction.

Arrays are indexed ``[x, y, z]``; the linear (serialized) order is
x-fastest, i.e. Fortran order. The physical position of voxel ``idx`` is
``origin + idx * spacing`` (mm).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryMismatchError, VolumeError

VIEWS = ("X", "Y", "Z")
_VIEW_AXIS = {"X": 0, "Y": 1, "Z": 2}


def view_axis(view):
    """Array axis normal to the slicing plane of ``view`` (X, Y or Z)."""
    try:
        return _VIEW_AXIS[str(view).upper()]
    except KeyError:
        raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}") from None


def _triple(values, name, positive=False):
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise VolumeError(f"{name} must have 3 components, got {len(out)}")
    if positive and not all(v > 0 for v in out):
        raise VolumeError(f"{name} components must be > 0, got {out}")
    if not all(np.isfinite(out)):
        raise VolumeError(f"{name} must be finite, got {out}")
    return out


def _check_dims(shape):
    if len(shape) < 3 or any(n < 1 for n in shape[:3]):
        raise VolumeError(f"volume dims must be three positive counts, got {tuple(shape[:3])}")


@dataclass(frozen=True, eq=False, repr=False)
class _Grid:
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    @property
    def dims(self):
        return tuple(int(n) for n in self._array().shape[:3])

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing}, origin={self.origin})"

    def same_geometry(self, other, atol=1e-9):
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
        )

    def check_geometry(self, other, what="volumes"):
        if not self.same_geometry(other):
            raise GeometryMismatchError(
                f"{what} differ in geometry: dims {self.dims} vs {other.dims}, "
                f"spacing {self.spacing} vs {other.spacing}, origin {self.origin} vs {other.origin}"
            )

    def physical(self, index):
        """Physical (mm) position of a voxel index."""
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)


@dataclass(frozen=True, eq=False, repr=False)
class ScalarVolume(_Grid):
    """Intensity grid with anisotropic spacing."""

    data: np.ndarray = None

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        data = np.asarray(data)
        if data.ndim != 3:
            raise VolumeError(f"scalar volume data must be 3-D, got shape {data.shape}")
        _check_dims(data.shape)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _triple(spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(origin, "origin"))

    def _array(self):
        return self.data

    def ravel(self):
        """Intensities in x-fastest linear order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_linear(cls, values, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        values = np.asarray(values)
        dims = tuple(int(n) for n in dims)
        if values.size != int(np.prod(dims)):
            raise VolumeError(f"data length {values.size} != prod(dims) {int(np.prod(dims))}")
        return cls(values.reshape(dims, order="F"), spacing, origin)


@dataclass(frozen=True, eq=False, repr=False)
class LabelVolume(_Grid):
    """Integer label grid with values in ``0..num_labels`` (0 is background)."""

    labels: np.ndarray = None
    num_labels: int = 0

    def __init__(self, labels, num_labels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise VolumeError(f"label volume must be 3-D, got shape {labels.shape}")
        _check_dims(labels.shape)
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise VolumeError("label volume must hold integers")
        num_labels = int(num_labels)
        if num_labels < 0:
            raise VolumeError("num_labels must be >= 0")
        labels = labels.astype(np.int64, copy=False)
        if labels.size and (labels.min() < 0 or labels.max() > num_labels):
            raise VolumeError(
                f"labels must lie in 0..{num_labels}, found range {labels.min()}..{labels.max()}"
            )
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_labels", num_labels)
        object.__setattr__(self, "spacing", _triple(spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(origin, "origin"))

    def _array(self):
        return self.labels

    def ravel(self):
        return self.labels.ravel(order="F")

    def with_labels(self, labels):
        """New volume sharing this geometry and label count."""
        return LabelVolume(labels, self.num_labels, self.spacing, self.origin)


@dataclass(frozen=True, eq=False, repr=False)
class ProbVolume(_Grid):
    """Per-voxel categorical distribution over ``num_labels + 1`` labels.

    ``probs`` has shape ``(nx, ny, nz, num_labels + 1)``.
    """

    probs: np.ndarray = None

    def __init__(self, probs, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), atol=1e-6):
        probs = np.asarray(probs, dtype=np.float64 if np.asarray(probs).dtype.kind != "f" else None)
        if probs.ndim != 4 or probs.shape[3] < 1:
            raise VolumeError(f"probability volume must be 4-D (x, y, z, label), got {probs.shape}")
        _check_dims(probs.shape)
        if probs.size:
            if not np.all(np.isfinite(probs)) or probs.min() < 0 or probs.max() > 1 + atol:
                raise VolumeError("probabilities must be finite and within [0, 1]")
            sums = probs.sum(axis=3)
            if np.max(np.abs(sums - 1.0)) > atol:
                raise VolumeError(f"probability rows must sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.3g})")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "spacing", _triple(spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(origin, "origin"))

    def _array(self):
        return self.probs

    @property
    def num_labels(self):
        return self.probs.shape[3] - 1

    @classmethod
    def one_hot(cls, seg, eta=0.0):
        """Softened one-hot encoding: ``1 - eta`` on the label, ``eta / L`` elsewhere."""
        n = seg.num_labels + 1
        if n == 1:
            return cls(np.ones(seg.dims + (1,)), seg.spacing, seg.origin)
        probs = np.full(seg.dims + (n,), eta / (n - 1))
        np.put_along_axis(probs, seg.labels[..., None], 1.0 - eta, axis=3)
        return cls(probs, seg.spacing, seg.origin)


def resample_isotropic(vol, target=0.5):
    """Trilinearly resample a scalar volume onto an isotropic ``target`` mm grid.

    The output keeps the origin and covers the input's physical extent to
    within one output voxel. Coordinates past the last input sample are
    clamped to the edge.
    """
    if not target > 0:
        raise ValueError(f"target spacing must be > 0, got {target}")
    if min(vol.data.shape) == 0:
        raise VolumeError("cannot resample a degenerate volume")
    spacing = np.asarray(vol.spacing)
    if np.all(spacing == target):
        return ScalarVolume(vol.data.copy(), vol.spacing, vol.origin)
    extent = (np.asarray(vol.dims) - 1) * spacing
    out_dims = tuple(int(np.floor(e / target + 1e-9)) + 1 for e in extent)
    axes = [np.arange(n) * (target / s) for n, s in zip(out_dims, spacing)]
    return ScalarVolume(interp_separable(vol.data, axes), (target,) * 3, vol.origin)


def resample_labels_isotropic(seg, target=0.5):
    """Nearest-neighbour counterpart of :func:`resample_isotropic` for labels."""
    if not target > 0:
        raise ValueError(f"target spacing must be > 0, got {target}")
    spacing = np.asarray(seg.spacing)
    extent = (np.asarray(seg.dims) - 1) * spacing
    out_dims = tuple(int(np.floor(e / target + 1e-9)) + 1 for e in extent)
    idx = [
        np.clip(np.floor(np.arange(n) * (target / s) + 0.5).astype(int), 0, d - 1)
        for n, s, d in zip(out_dims, spacing, seg.dims)
    ]
    labels = seg.labels[np.ix_(*idx)]
    return LabelVolume(labels, seg.num_labels, (target,) * 3, seg.origin)


def patch_offsets(half_extent=2.25, step=0.5):
    """Sample offsets (mm) of a centred patch, e.g. 9 samples for 2.25 / 0.5.

    The patch is ``2 * half_extent`` wide when each sample is read as a
    cubic cell of edge ``step``.
    """
    n = int(round(2 * half_extent / step))
    if n < 1 or n % 2 == 0 or not np.isclose(n * step, 2 * half_extent):
        raise ValueError(
            f"half_extent {half_extent} / step {step} must give an odd whole number of samples"
        )
    return (np.arange(n) - (n - 1) / 2) * step


def _check_center(vol, center):
    center = tuple(int(c) for c in center)
    if len(center) != 3 or any(c < 0 or c >= n for c, n in zip(center, vol.dims)):
        raise IndexError(f"patch center {center} outside volume of dims {vol.dims}")
    return center


def _sample(vol, center, axis_offsets):
    grids = [
        c + np.asarray(off) / s for c, off, s in zip(center, axis_offsets, vol.spacing)
    ]
    return interp_separable(vol.data, grids)


def extract_patch3(vol, center, half_extent=2.25, step=0.5):
    """Isotropic 3-D patch (9x9x9 by default) centred on a voxel.

    Samples lie on a ``step`` mm lattice around the voxel's physical
    position, trilinearly interpolated with edge clamping.
    """
    center = _check_center(vol, center)
    off = patch_offsets(half_extent, step)
    return _sample(vol, center, (off, off, off))


def extract_patch2(vol, center, view, half_extent=2.25, step=0.5):
    """In-plane patch through ``center`` perpendicular to ``view``'s axis.

    The result keeps a length-1 dimension along the view axis, so a Z patch
    has shape ``(9, 9, 1)`` and broadcasts against the matching 3-D patch.
    """
    center = _check_center(vol, center)
    axis = view_axis(view)
    off = patch_offsets(half_extent, step)
    offsets = [off, off, off]
    offsets[axis] = np.zeros(1)
    return _sample(vol, center, offsets)


def _interp_axis(data, axis, coord):
    n = data.shape[axis]
    coord = np.clip(np.asarray(coord, dtype=np.float64), 0, n - 1)
    lo = np.floor(coord).astype(np.intp)
    frac = coord - lo
    if not np.any(frac):
        return np.take(data, lo, axis=axis)
    hi = np.minimum(lo + 1, n - 1)
    shape = [1] * data.ndim
    shape[axis] = len(coord)
    frac = frac.reshape(shape)
    low = np.take(data, lo, axis=axis)
    # written as low + f * (high - low) so equal neighbours interpolate exactly
    return low + frac * (np.take(data, hi, axis=axis) - low)


def interp_separable(data, coords):
    """Trilinear samples of ``data`` on the tensor grid ``coords[0] x coords[1] x coords[2]``.

    Coordinates are fractional voxel indices, clamped to the volume
    (edge replication). Interpolating one axis at a time gives the same
    trilinear weights and reproduces constants exactly.
    """
    out = np.asarray(data, dtype=np.float64)
    for axis, c in enumerate(coords):
        out = _interp_axis(out, axis, c)
    return out


def shift_sample(data, axis, offset):
    """Linearly interpolate ``data`` at ``index + offset`` along ``axis``.

    Coordinates are clamped to ``[0, n - 1]`` (edge replication). The
    interpolation weight depends on ``offset`` alone, so the value at a
    voxel does not depend on where the array was cropped.
    """
    n = data.shape[axis]
    whole = np.floor(offset)
    frac = float(offset - whole)
    lo = np.arange(n) + int(whole)
    if frac == 0.0:
        return np.take(data, np.clip(lo, 0, n - 1), axis=axis)
    weight = np.full(n, frac)
    weight[(lo < 0) | (lo >= n - 1)] = 0.0
    shape = [1] * data.ndim
    shape[axis] = n
    low = np.take(data, np.clip(lo, 0, n - 1), axis=axis)
    high = np.take(data, np.clip(lo + 1, 0, n - 1), axis=axis)
    return low + weight.reshape(shape) * (high - low)
