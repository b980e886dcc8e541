"""Seeded synthetic phantoms and per-view segmentation corruption.

Random streams are derived with :class:`numpy.random.SeedSequence` from the
64-bit seed and a fixed ``spawn_key``:

* intensity noise of :func:`gen_phantom`: ``(0,)``
* slice ``k`` of view ``v`` (X=0, Y=1, Z=2) in :func:`corrupt_view`: ``(1, v, k)``

so every slice draws from its own stream and results do not depend on the
order (or parallelism) in which slices are processed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import SpecError
from .volume import VIEWS, LabelVolume, ProbVolume, ScalarVolume, view_axis


def _rng(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass(frozen=True)
class Primitive:
    """Ellipsoid (``radii_mm`` are semi-axes) or box (``radii_mm`` are half-widths)."""

    kind: str
    center_mm: tuple
    radii_mm: tuple
    intensity: float = 50.0

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "box"):
            raise SpecError(f"unknown primitive kind {self.kind!r}")
        if len(self.center_mm) != 3 or len(self.radii_mm) != 3:
            raise SpecError("primitive center and radii need 3 components")
        if any(r <= 0 for r in self.radii_mm):
            raise SpecError("primitive radii must be > 0")

    def mask(self, dims, spacing, origin):
        grids = [o + np.arange(n) * s - c for n, s, o, c in zip(dims, spacing, origin, self.center_mm)]
        x, y, z = np.meshgrid(*grids, indexing="ij", sparse=True)
        rx, ry, rz = self.radii_mm
        if self.kind == "ellipsoid":
            return (x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2 <= 1.0
        return (np.abs(x) <= rx) & (np.abs(y) <= ry) & (np.abs(z) <= rz)


@dataclass(frozen=True)
class ViewCorruption:
    """Slice-wise degradation applied to the ground truth for one view.

    Each slice perpendicular to the view axis is independently shifted in
    plane by up to ``boundary_jitter_mm``, eroded (square kernel of
    ``erosion_radius`` voxels) with probability ``slice_dropout_prob`` and
    has one structure relabelled with probability ``label_swap_prob``.
    """

    view: str
    boundary_jitter_mm: float = 0.0
    slice_dropout_prob: float = 0.0
    label_swap_prob: float = 0.0
    erosion_radius: int = 1
    eta: float = 0.1

    def __post_init__(self):
        view_axis(self.view)
        for name in ("slice_dropout_prob", "label_swap_prob", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {v}")
        if self.boundary_jitter_mm < 0 or self.erosion_radius < 0:
            raise SpecError("jitter and erosion radius must be >= 0")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple = (64, 64, 64)
    spacing: tuple = (0.5, 0.5, 0.5)
    origin: tuple = (0.0, 0.0, 0.0)
    background: float = 100.0
    noise_sigma: float = 5.0
    structures: tuple = ()
    corruptions: tuple = ()

    @property
    def n_structures(self):
        return len(self.structures)

    def corruption(self, view):
        for c in self.corruptions:
            if c.view.upper() == view.upper():
                return c
        return ViewCorruption(view)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["structures"] = tuple(
            Primitive(p["kind"], tuple(p["center_mm"]), tuple(p["radii_mm"]), p.get("intensity", 50.0))
            for p in d.get("structures", ())
        )
        d["corruptions"] = tuple(ViewCorruption(**c) for c in d.get("corruptions", ()))
        for key in ("dims", "spacing", "origin"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown phantom spec keys {sorted(unknown)}")
        return cls(**d)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_spec(path):
    """Read a phantom spec from a JSON file."""
    with open(path) as fh:
        try:
            return PhantomSpec.from_dict(json.load(fh))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SpecError(f"invalid phantom spec {path}: {exc}") from exc


def default_spec(seed=0):
    """64^3 grid at 0.5 mm with four disjoint structures and three degraded views.

    Every view misses structure boundaries slice by slice (erosion) with a
    view-specific rate and is jittered in plane by one voxel; Z is the
    weakest view, with larger erosion and occasional label swaps.
    """
    structures = (
        Primitive("ellipsoid", (11.0, 11.0, 16.0), (7.0, 6.0, 9.0), 60.0),
        Primitive("ellipsoid", (23.0, 11.0, 12.0), (4.0, 4.5, 6.0), 30.0),
        Primitive("box", (22.0, 23.0, 20.0), (3.5, 4.0, 5.0), -40.0),
        Primitive("ellipsoid", (10.0, 24.0, 21.0), (3.5, 4.5, 4.0), 90.0),
    )
    corruptions = (
        ViewCorruption("X", boundary_jitter_mm=0.5, slice_dropout_prob=0.3),
        ViewCorruption("Y", boundary_jitter_mm=0.5, slice_dropout_prob=0.3),
        ViewCorruption("Z", boundary_jitter_mm=0.5, slice_dropout_prob=0.6, label_swap_prob=0.1,
                       erosion_radius=2),
    )
    return PhantomSpec(seed=seed, noise_sigma=2.0, structures=structures, corruptions=corruptions)


def separated_spec(seed=0, dims=(56, 56, 56)):
    """Three small structures far enough apart that their fusion boxes never meet."""
    structures = (
        Primitive("ellipsoid", (6.0, 6.0, 6.0), (3.0, 2.5, 3.5), 60.0),
        Primitive("box", (21.0, 6.0, 20.0), (2.5, 3.0, 2.5), -40.0),
        Primitive("ellipsoid", (7.0, 21.0, 21.0), (3.0, 3.0, 2.5), 90.0),
    )
    corruptions = (
        ViewCorruption("X", boundary_jitter_mm=0.5, slice_dropout_prob=0.2),
        ViewCorruption("Y", boundary_jitter_mm=0.5, slice_dropout_prob=0.2),
        ViewCorruption("Z", slice_dropout_prob=0.5, erosion_radius=1),
    )
    return PhantomSpec(seed=seed, dims=dims, noise_sigma=2.0, structures=structures,
                       corruptions=corruptions)


def gen_phantom(spec):
    """Intensity volume and disjoint ground-truth labels for ``spec``.

    Structure ``k`` (1-based, in spec order) gets label ``k`` and adds its
    intensity offset to the background; Gaussian noise of ``noise_sigma``
    is added everywhere. Intensities are float32.
    """
    dims = tuple(int(n) for n in spec.dims)
    labels = np.zeros(dims, dtype=np.int64)
    offsets = np.zeros(len(spec.structures) + 1)
    for k, prim in enumerate(spec.structures, start=1):
        m = prim.mask(dims, spec.spacing, spec.origin)
        if np.any(labels[m] != 0):
            raise SpecError(f"structure {k} overlaps an earlier structure")
        labels[m] = k
        offsets[k] = prim.intensity
    intensity = spec.background + offsets[labels]
    if spec.noise_sigma > 0:
        intensity = intensity + _rng(spec.seed, 0).normal(0.0, spec.noise_sigma, dims)
    vol = ScalarVolume(intensity.astype(np.float32), spec.spacing, spec.origin)
    return vol, LabelVolume(labels, len(spec.structures), spec.spacing, spec.origin)


def _shift2d(a, dx, dy):
    out = np.zeros_like(a)
    nx, ny = a.shape
    src_x = slice(max(-dx, 0), nx - max(dx, 0))
    dst_x = slice(max(dx, 0), nx - max(-dx, 0))
    src_y = slice(max(-dy, 0), ny - max(dy, 0))
    dst_y = slice(max(dy, 0), ny - max(-dy, 0))
    out[dst_x, dst_y] = a[src_x, src_y]
    return out


def erode_slice(sl, radius):
    """Erode every foreground label of a 2-D slice with a square kernel; lost pixels become 0."""
    if radius <= 0:
        return sl.copy()
    kernel = np.ones((2 * radius + 1, 2 * radius + 1), bool)
    out = np.zeros_like(sl)
    for lab in np.unique(sl):
        if lab == 0:
            continue
        keep = ndimage.binary_erosion(sl == lab, structure=kernel, border_value=0)
        out[keep] = lab
    return out


def corrupt_slice(sl, c, rng, num_labels, in_plane_spacing):
    """Apply one view's corruption to a single 2-D slice with its own stream."""
    jx = int(round(c.boundary_jitter_mm / in_plane_spacing[0]))
    jy = int(round(c.boundary_jitter_mm / in_plane_spacing[1]))
    dx = int(rng.integers(-jx, jx + 1))
    dy = int(rng.integers(-jy, jy + 1))
    u_drop, u_swap, u_from, u_to = rng.random(4)
    out = _shift2d(sl, dx, dy)
    if u_drop < c.slice_dropout_prob:
        out = erode_slice(out, c.erosion_radius)
    if u_swap < c.label_swap_prob:
        present = [int(v) for v in np.unique(out) if v != 0]
        if present:
            src = present[min(int(u_from * len(present)), len(present) - 1)]
            targets = [s for s in range(1, num_labels + 1) if s != src] or [0]
            dst = targets[min(int(u_to * len(targets)), len(targets) - 1)]
            out = np.where(out == src, dst, out)
    return out


def corrupt_view(gt, c, seed):
    """Degraded hard labels and softened one-hot probabilities for one view."""
    axis = view_axis(c.view)
    v_index = VIEWS.index(c.view.upper())
    in_plane = [s for a, s in enumerate(gt.spacing) if a != axis]
    src = np.moveaxis(gt.labels, axis, 0)
    out = np.empty_like(src)
    for k in range(src.shape[0]):
        out[k] = corrupt_slice(src[k], c, _rng(seed, 1, v_index, k), gt.num_labels, in_plane)
    seg = gt.with_labels(np.moveaxis(out, 0, axis))
    return seg, ProbVolume.one_hot(seg, c.eta)


def corrupt_views(gt, spec, seed=None):
    """Corrupted segmentations and probability maps for views X, Y, Z."""
    seed = spec.seed if seed is None else seed
    pairs = [corrupt_view(gt, spec.corruption(v), seed) for v in VIEWS]
    return [p[0] for p in pairs], [p[1] for p in pairs]
