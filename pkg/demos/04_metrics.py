"""Dice overlap and average surface distance on simple shapes."""
import numpy as np

from viewfusion.metrics import avg_surface_distance, dsc, evaluate, format_reports
from viewfusion.volume import LabelVolume

a = np.zeros((16, 8, 8), int)
a[0:8] = 1
b = np.zeros_like(a)
b[4:12] = 1
A, B = LabelVolume(a, 1), LabelVolume(b, 1)
print("8^3 cube vs the same cube shifted 4 voxels:", dsc(A, B, 1), "% DSC")

cube = np.zeros((12, 12, 12), int)
cube[3:9, 3:9, 3:9] = 1
grown = np.zeros_like(cube)
grown[2:10, 2:10, 2:10] = 1
gt = LabelVolume(cube, 1, (0.5, 0.5, 0.5))
pred = LabelVolume(grown, 1, (0.5, 0.5, 0.5))
print("surface distance of a one-voxel dilation at 0.5 mm:", avg_surface_distance(pred, gt, 1), "mm")
print("symmetric variant:", round(avg_surface_distance(pred, gt, 1, symmetric=True), 4), "mm")
print()
print(format_reports(evaluate(pred, gt)), end="")
