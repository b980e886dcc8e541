"""Majority voting versus similarity-weighted fusion on a phantom."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import FusionConfig, majority_vote, run_fusion
from .metrics import evaluate
from .phantom import corrupt_views, default_spec, gen_phantom


@dataclass
class Comparison:
    views: dict
    mv: list
    lssf: list
    result: object

    @staticmethod
    def mean_dsc(reports):
        return float(np.mean([r.dsc for r in reports]))

    def summary(self):
        lines = ["label\tmv_dsc\tlssf_dsc\tmv_asd\tlssf_asd"]
        for a, b in zip(self.mv, self.lssf):
            lines.append(f"{a.label}\t{a.dsc:.6g}\t{b.dsc:.6g}\t{a.asd:.6g}\t{b.asd:.6g}")
        lines.append(f"mean\t{self.mean_dsc(self.mv):.6g}\t{self.mean_dsc(self.lssf):.6g}")
        return "\n".join(lines)


def compare_on_phantom(spec=None, cfg=None, threads=1):
    """Generate, corrupt, fuse both ways and score every structure."""
    spec = spec or default_spec()
    volume, gt = gen_phantom(spec)
    segs, probs = corrupt_views(gt, spec)
    labels = range(1, gt.num_labels + 1)
    mv = majority_vote(segs)
    result = run_fusion(volume, segs, probs, cfg or FusionConfig(), threads=threads)
    return Comparison(
        views={v: evaluate(s, gt, labels) for v, s in zip("XYZ", segs)},
        mv=evaluate(mv, gt, labels),
        lssf=evaluate(result.labels, gt, labels),
        result=result,
    )
