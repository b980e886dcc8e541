"""Voxel grids, isotropic resampling and the two kinds of patch.

A CT-like volume usually has thick slices along z. Similarity weights are
computed on 9x9x9 and 9x9 patches sampled on a 0.5 mm lattice, whatever
the native spacing is.
"""
import numpy as np

from viewfusion.volume import ScalarVolume, extract_patch2, extract_patch3, resample_isotropic

# a linear ramp with 0.8 x 0.8 x 2.5 mm voxels
dims, spacing = (24, 24, 8), (0.8, 0.8, 2.5)
x, y, z = np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, spacing)], indexing="ij")
vol = ScalarVolume(10 + 2 * x - y + 0.5 * z, spacing)
print("native:", vol)

iso = resample_isotropic(vol, 0.5)
print("resampled:", iso)
print("max deviation from the analytic ramp:",
      np.abs(iso.data - (10 + 2 * np.arange(iso.dims[0])[:, None, None] * 0.5
                         - np.arange(iso.dims[1])[None, :, None] * 0.5
                         + 0.5 * np.arange(iso.dims[2])[None, None, :] * 0.5)).max())

center = (12, 12, 4)
p3 = extract_patch3(vol, center)
p2 = extract_patch2(vol, center, "Z")
print("3-D patch", p3.shape, "2-D patch", p2.shape)
# the in-plane patch is the central plane of the cube on the same lattice
print("central plane matches:", np.array_equal(p2[..., 0], p3[:, :, 4]))
