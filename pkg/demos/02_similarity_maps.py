"""Direction-dependent similarity between view slices and the volume.

For a view, the in-plane patch through a voxel is replicated along the view
axis and compared with the 3-D patch by SSIM. Where the anatomy changes
quickly across slices, a 2-D view cannot see it and its weight drops.
"""
import numpy as np

from viewfusion.phantom import default_spec, gen_phantom
from viewfusion.ssim import similarity_map
from viewfusion.volume import ScalarVolume

volume, gt = gen_phantom(default_spec(0))
alpha = similarity_map(volume, "all", threads=3)

for k, view in enumerate("XYZ"):
    a = alpha[..., k]
    edge = a[gt.labels > 0].mean()
    print(f"view {view}: mean weight {a.mean():.4f}, inside structures {edge:.4f}, min {a.min():.4f}")

# a volume that only varies in-plane is perfectly explained by every Z slice
flat = volume.data[:, :, :1].repeat(volume.dims[2], axis=2)
z_only = similarity_map(ScalarVolume(flat, volume.spacing), "Z", clamp=False)
print("Z weights on a z-constant volume are all exactly 1:", bool(np.all(z_only == 1.0)))
