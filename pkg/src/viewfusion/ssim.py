"""Direction-dependent structural similarity between view slices and the volume.

For each voxel and view, a 2-D in-plane patch of the slice through the
voxel is compared with the isotropic 3-D patch around it. The 2-D patch is
replicated along the view axis so both sides hold the same number of
paired samples; statistics are population (``ddof=0``) moments.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import PatchError
from .volume import VIEWS, ScalarVolume, patch_offsets, shift_sample, view_axis


@dataclass(frozen=True)
class SsimConfig:
    """Stabilisers and patch geometry.

    ``c1``/``c2`` left as ``None`` are derived from the volume's intensity
    range ``R`` as ``(0.01 R)^2`` and ``(0.03 R)^2`` (``R = 1`` for a
    constant volume).
    """

    c1: float | None = None
    c2: float | None = None
    patch_half_extent: float = 2.25
    resample_spacing: float = 0.5
    clamp_floor: float = 1e-3

    def __post_init__(self):
        for name in ("c1", "c2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if not 0.0 < self.clamp_floor < 1.0:
            raise ValueError(f"clamp_floor must lie in (0, 1), got {self.clamp_floor}")
        patch_offsets(self.patch_half_extent, self.resample_spacing)

    def resolve(self, vol):
        """Copy with missing stabilisers filled in from ``vol``."""
        if self.c1 is not None and self.c2 is not None:
            return self
        data = vol.data
        value_range = float(data.max() - data.min()) if data.size else 0.0
        if value_range <= 0:
            value_range = 1.0
        return replace(
            self,
            c1=self.c1 if self.c1 is not None else (0.01 * value_range) ** 2,
            c2=self.c2 if self.c2 is not None else (0.03 * value_range) ** 2,
        )


def _ssim_from_moments(mu2, mu3, var2, var3, cov, c1, c2):
    return ((2 * mu2 * mu3 + c1) * (2 * cov + c2)) / (
        (mu2**2 + mu3**2 + c1) * (var2 + var3 + c2)
    )


def ssim_patch(p2, p3, cfg, clamp=True):
    """SSIM between a 2-D view patch and a 3-D patch.

    ``p2`` must broadcast against ``p3`` (it carries a length-1 axis along
    the view direction, as returned by :func:`~viewfusion.volume.extract_patch2`).
    With ``clamp`` the result is limited to ``[cfg.clamp_floor, 1]``.
    """
    if cfg.c1 is None or cfg.c2 is None:
        raise ValueError("ssim_patch needs explicit c1 and c2; call SsimConfig.resolve first")
    p2 = np.asarray(p2, dtype=np.float64)
    p3 = np.asarray(p3, dtype=np.float64)
    if p3.ndim != 3 or p2.ndim != 3 or sorted(p2.shape)[0] != 1:
        raise PatchError(f"expected a 3-D patch and a single-plane patch, got {p3.shape} and {p2.shape}")
    try:
        p2r = np.broadcast_to(p2, p3.shape)
    except ValueError:
        raise PatchError(f"patch shapes {p2.shape} and {p3.shape} are not on matched lattices") from None
    mu2, mu3 = p2r.mean(), p3.mean()
    var2 = ((p2r - mu2) ** 2).mean()
    var3 = ((p3 - mu3) ** 2).mean()
    cov = ((p2r - mu2) * (p3 - mu3)).mean()
    value = float(_ssim_from_moments(mu2, mu3, var2, var3, cov, cfg.c1, cfg.c2))
    if clamp:
        value = min(max(value, cfg.clamp_floor), 1.0)
    return value


def _roi_slices(roi, dims):
    if roi is None:
        return tuple(slice(0, n) for n in dims)
    out = []
    for s, n in zip(roi, dims):
        start, stop, _ = s.indices(n)
        if s.start is not None and not 0 <= s.start <= n or s.stop is not None and not 0 <= s.stop <= n:
            raise IndexError(f"roi {roi} exceeds volume dims {dims}")
        out.append(slice(start, stop))
    return tuple(out)


def _view_moments(data, axis, steps):
    """Per-voxel sums for one view's SSIM map.

    The 3-D samples are accumulated as differences ``d`` from the replicated
    2-D sample, so a volume constant along the view axis yields ``d == 0``
    exactly and the similarity evaluates to exactly 1.
    """
    a, b = [ax for ax in range(3) if ax != axis]
    s2 = np.zeros(data.shape)
    q2 = np.zeros(data.shape)
    sd = np.zeros(data.shape)
    qd = np.zeros(data.shape)
    x2d = np.zeros(data.shape)
    for da in steps[a]:
        va = shift_sample(data, a, da)
        for db in steps[b]:
            plane = shift_sample(va, b, db)
            column = np.zeros(data.shape)
            for dc in steps[axis]:
                if dc:
                    d = shift_sample(plane, axis, dc) - plane
                    column += d
                    qd += d * d
            sd += column
            s2 += plane
            q2 += plane * plane
            x2d += plane * column
    return s2, q2, sd, qd, x2d


def _similarity_one_view(data, axis, steps, cfg):
    n_plane = np.prod([len(steps[ax]) for ax in range(3) if ax != axis])
    n_total = n_plane * len(steps[axis])
    s2, q2, sd, qd, x2d = _view_moments(data, axis, steps)
    mu2 = s2 / n_plane
    mud = sd / n_total
    var2 = np.maximum(q2 / n_plane - mu2 * mu2, 0.0)
    vard = np.maximum(qd / n_total - mud * mud, 0.0)
    cross = x2d / n_total - mu2 * mud
    mu3 = mu2 + mud
    cov = var2 + cross
    var3 = np.maximum(var2 + 2 * cross + vard, 0.0)
    return _ssim_from_moments(mu2, mu3, var2, var3, cov, cfg.c1, cfg.c2)


def similarity_map(vol, view, cfg=None, roi=None, clamp=True, threads=1):
    """Per-voxel SSIM weights for one view (``"X"``, ``"Y"``, ``"Z"``) or ``"all"``.

    Returns an array over the ROI (whole volume by default); for ``"all"``
    the views are stacked on a trailing axis in X, Y, Z order. ``roi`` is
    a tuple of three slices. Each voxel is computed independently, so the
    result does not depend on ``threads``.
    """
    cfg = (cfg or SsimConfig()).resolve(vol)
    dims = vol.dims
    roi = _roi_slices(roi, dims)
    off = patch_offsets(cfg.patch_half_extent, cfg.resample_spacing)
    steps = [off / s for s in vol.spacing]
    half = [int(np.ceil(np.max(np.abs(st)))) + 1 for st in steps]
    # samples reach at most `half` voxels past the roi; cropping there keeps
    # edge clamping confined to the true volume border
    halo = tuple(
        slice(max(r.start - h, 0), min(r.stop + h, n)) for r, h, n in zip(roi, half, dims)
    )
    data = vol.data[halo].astype(np.float64)
    inner = tuple(slice(r.start - h.start, r.stop - h.start) for r, h in zip(roi, halo))
    views = list(VIEWS) if str(view).lower() == "all" else [view]
    axes = [view_axis(v) for v in views]

    def one(axis):
        pre = _similarity_one_view(data, axis, steps, cfg)[inner]
        if clamp:
            pre = np.clip(pre, cfg.clamp_floor, 1.0)
        return pre

    if threads > 1 and len(axes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            maps = list(pool.map(one, axes))
    else:
        maps = [one(ax) for ax in axes]
    if str(view).lower() == "all":
        return np.stack(maps, axis=-1)
    return maps[0]


def similarity_maps(vol, cfg=None, threads=1):
    """All three view maps as an ``(nx, ny, nz, 3)`` array in X, Y, Z order."""
    return similarity_map(vol, "all", cfg, threads=threads)
