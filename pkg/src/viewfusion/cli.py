"""Command-line pipeline: phantom generation, corruption, similarity maps, fusion, evaluation.

Exit status is 0 on success, 1 on a usage error and 2 on a data error
(bad file, inconsistent geometry, invalid spec). Floating-point values
printed to the terminal use 6 significant digits; files keep full
precision.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import ViewFusionError
from .fusion import FusionConfig, compute_prior, majority_vote, run_fusion, run_fusion_voi
from .io import ChannelVolume, file_digest, read_volume, write_manifest, write_theta, write_volume
from .metrics import evaluate, format_reports
from .oan import fuse_stage_probs, label_from_probs
from .phantom import PhantomSpec, corrupt_view, default_spec, gen_phantom, load_spec, separated_spec
from .ssim import SsimConfig, similarity_map
from .volume import VIEWS, LabelVolume, ProbVolume, ScalarVolume

PRESETS = {"default": default_spec, "separated": separated_spec}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _expect(vol, kind, path):
    if not isinstance(vol, kind):
        raise ViewFusionError(f"{path}: expected a {kind.__name__}, found {type(vol).__name__}")
    return vol


def _load_spec(args):
    spec = load_spec(args.spec) if args.spec else PRESETS[args.preset]()
    if args.seed is not None:
        spec = PhantomSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    return spec


def cmd_phantom_gen(args):
    spec = _load_spec(args)
    volume, gt = gen_phantom(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    write_volume(volume, os.path.join(args.out_dir, "volume.vfv"))
    write_volume(gt, os.path.join(args.out_dir, "gt.vfv"))
    with open(os.path.join(args.out_dir, "spec.json"), "w") as fh:
        fh.write(spec.dumps() + "\n")
    print(f"phantom {gt.dims} with {gt.num_labels} structures, seed {spec.seed}")
    return 0


def cmd_corrupt(args):
    spec = _load_spec(args)
    gt = _expect(read_volume(args.gt), LabelVolume, args.gt)
    os.makedirs(args.out_dir, exist_ok=True)
    for view in args.views:
        seg, prob = corrupt_view(gt, spec.corruption(view), spec.seed)
        write_volume(seg, os.path.join(args.out_dir, f"seg_{view}.vfv"))
        write_volume(prob, os.path.join(args.out_dir, f"prob_{view}.vfv"))
    print(f"corrupted views {' '.join(args.views)} with seed {spec.seed}")
    return 0


def _ssim_config(args):
    return SsimConfig(c1=args.c1, c2=args.c2)


def cmd_ssim(args):
    vol = _expect(read_volume(args.volume), ScalarVolume, args.volume)
    alpha = similarity_map(vol, args.view, _ssim_config(args), threads=args.threads)
    if alpha.ndim == 3:
        alpha = alpha[..., None]
    write_volume(ChannelVolume(alpha, vol.spacing, vol.origin), args.out)
    print(f"similarity min {alpha.min():.6g} mean {alpha.mean():.6g}")
    return 0


def _fusion_config(args):
    return FusionConfig(
        max_iters=args.max_iters,
        tol=args.tol,
        mstep_mode=args.mstep_mode,
        prior_mode=args.prior_mode,
        theta_init=args.theta_init,
        init_diagonal=args.init_diagonal,
        voi_margin=args.voi_margin,
        similarity="none" if args.mode == "staple" else "ssim",
        ssim=_ssim_config(args),
    )


def _alpha_from_file(path, views, segs):
    maps = _expect(read_volume(path), ChannelVolume, path)
    segs[0].check_geometry(maps, "similarity maps and segmentations")
    if maps.channels == 3:
        index = {v: k for k, v in enumerate(VIEWS)}
        return np.stack([maps.data[..., index[v]] for v in views]).astype(np.float64)
    if maps.channels == len(views):
        return np.moveaxis(maps.data, 3, 0).astype(np.float64)
    raise ViewFusionError(f"{path}: {maps.channels} similarity channels for {len(views)} views")


def cmd_fuse(args):
    segs = [_expect(read_volume(p), LabelVolume, p) for p in args.seg]
    probs = [_expect(read_volume(p), ProbVolume, p) for p in args.prob] if args.prob else None
    if probs is not None and len(probs) != len(segs):
        raise UsageError("--prob needs one file per --seg")
    views = [v.upper() for v in (args.views or VIEWS[: len(segs)])]
    if len(views) != len(segs):
        raise UsageError("--views needs one entry per --seg")
    volume = _expect(read_volume(args.volume), ScalarVolume, args.volume) if args.volume else None
    if args.mode == "lssf" and volume is None and args.alpha is None:
        raise UsageError("lssf mode needs --volume or --alpha")
    cfg = _fusion_config(args)
    inputs = {f"seg[{j}]": file_digest(p) for j, p in enumerate(args.seg)}
    inputs.update({f"prob[{j}]": file_digest(p) for j, p in enumerate(args.prob or [])})
    for role in ("volume", "alpha", "gt"):
        if getattr(args, role):
            inputs[role] = file_digest(getattr(args, role))

    started = time.perf_counter()
    manifest = {
        "tool": "viewfusion",
        "version": __version__,
        "command": "fuse",
        "mode": args.mode,
        "seed": args.seed,
        "views": views,
        "voi": bool(args.voi),
        "inputs": inputs,
    }
    result = None
    if args.mode == "mv":
        prior = compute_prior(probs, "mean-prob") if probs else None
        labels = majority_vote(segs, prior)
    else:
        alpha = _alpha_from_file(args.alpha, views, segs) if args.alpha else None
        kwargs = dict(alpha=alpha, views=views, threads=args.threads)
        if args.voi:
            result = run_fusion_voi(volume, segs, probs, cfg, **kwargs)
        else:
            result = run_fusion(volume, segs, probs, cfg, **kwargs)
        labels = result.labels
        manifest["config"] = cfg.to_dict()
        manifest["iterations"] = result.iterations
        manifest["converged"] = result.converged
        manifest["theta_trajectory"] = {
            "deltas": result.deltas,
            "initial": result.theta_history[0],
            "final": result.theta,
        }
        if result.boxes is not None:
            manifest["voi_boxes"] = result.boxes
    elapsed = time.perf_counter() - started

    write_volume(labels, args.out)
    if result is not None:
        if args.posterior:
            write_volume(result.posterior, args.posterior)
        if args.theta:
            write_theta(result.theta, args.theta)
    if args.gt:
        gt = _expect(read_volume(args.gt), LabelVolume, args.gt)
        reports = evaluate(labels, gt, range(1, gt.num_labels + 1))
        manifest["evaluation"] = [r.__dict__ for r in reports]
        manifest["mean_dsc"] = float(np.mean([r.dsc for r in reports])) if reports else None
        sys.stdout.write(format_reports(reports))
    if result is not None:
        print(f"{args.mode}: {result.iterations} iterations, converged={result.converged}")
    if args.manifest:
        voxels = int(np.prod(labels.dims))
        timing = {"wall_time_s": elapsed, "threads": args.threads, "voxels": voxels,
                  "voxels_per_s": voxels / elapsed if elapsed > 0 else None}
        write_manifest(manifest, args.manifest, wall_time=timing)
    return 0


def cmd_eval(args):
    pred = _expect(read_volume(args.pred), LabelVolume, args.pred)
    gt = _expect(read_volume(args.gt), LabelVolume, args.gt)
    labels = args.labels if args.labels else None
    reports = evaluate(pred, gt, labels)
    text = format_reports(reports)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_oan_fuse_stages(args):
    p1 = _expect(read_volume(args.p1), ProbVolume, args.p1)
    p2 = _expect(read_volume(args.p2), ProbVolume, args.p2)
    p1.check_geometry(p2, "stage probability maps")
    fused = fuse_stage_probs(p1.probs, p2.probs, args.rho)
    write_volume(ProbVolume(fused, p1.spacing, p1.origin), args.out)
    if args.labels_out:
        write_volume(LabelVolume(label_from_probs(fused), p1.num_labels, p1.spacing, p1.origin),
                     args.labels_out)
    return 0


def _add_spec_args(p):
    p.add_argument("--spec", help="phantom spec JSON (default: built-in preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default")
    p.add_argument("--seed", type=int, help="override the spec seed")


def _add_ssim_args(p):
    p.add_argument("--c1", type=float, help="luminance stabiliser (default from intensity range)")
    p.add_argument("--c2", type=float, help="contrast stabiliser (default from intensity range)")


def build_parser():
    parser = _Parser(prog="viewfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    phantom = sub.add_parser("phantom", help="synthetic phantoms")
    phantom_sub = phantom.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = phantom_sub.add_parser("gen", help="write volume.vfv, gt.vfv and spec.json")
    _add_spec_args(gen)
    gen.add_argument("--out-dir", required=True)
    gen.set_defaults(func=cmd_phantom_gen)

    corrupt = sub.add_parser("corrupt", help="per-view degraded segmentations")
    _add_spec_args(corrupt)
    corrupt.add_argument("--gt", required=True)
    corrupt.add_argument("--views", nargs="+", default=list(VIEWS), type=str.upper, choices=VIEWS)
    corrupt.add_argument("--out-dir", required=True)
    corrupt.set_defaults(func=cmd_corrupt)

    ssim = sub.add_parser("ssim", help="per-view similarity maps")
    ssim.add_argument("--volume", required=True)
    ssim.add_argument("--view", default="all", type=str.upper, choices=list(VIEWS) + ["ALL"])
    ssim.add_argument("--out", required=True)
    ssim.add_argument("--threads", type=int, default=1)
    _add_ssim_args(ssim)
    ssim.set_defaults(func=cmd_ssim)

    fuse = sub.add_parser("fuse", help="fuse view segmentations")
    fuse.add_argument("--mode", choices=("mv", "staple", "lssf"), default="lssf")
    fuse.add_argument("--seg", nargs="+", required=True)
    fuse.add_argument("--prob", nargs="+")
    fuse.add_argument("--views", nargs="+", type=str.upper, choices=VIEWS)
    fuse.add_argument("--volume")
    fuse.add_argument("--alpha", help="precomputed similarity maps (from `ssim`)")
    fuse.add_argument("--out", required=True)
    fuse.add_argument("--posterior")
    fuse.add_argument("--theta")
    fuse.add_argument("--manifest")
    fuse.add_argument("--gt", help="ground truth; adds an evaluation to the manifest")
    fuse.add_argument("--voi", action="store_true", help="decompose into per-structure boxes")
    fuse.add_argument("--voi-margin", type=int, default=4)
    fuse.add_argument("--max-iters", type=int, default=50)
    fuse.add_argument("--tol", type=float, default=1e-4)
    fuse.add_argument("--mstep-mode", choices=("paper", "normalized"), default="paper")
    fuse.add_argument("--prior-mode", choices=("mean-prob", "vote-frequency", "uniform"), default="mean-prob")
    fuse.add_argument("--theta-init", choices=("from-mv", "uniform-diagonal"), default="from-mv")
    fuse.add_argument("--init-diagonal", type=float, default=0.9)
    fuse.add_argument("--threads", type=int, default=1)
    fuse.add_argument("--seed", type=int, default=0, help="recorded in the manifest; fusion is deterministic")
    _add_ssim_args(fuse)
    fuse.set_defaults(func=cmd_fuse)

    ev = sub.add_parser("eval", help="DSC and surface distance per structure")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--labels", nargs="+", type=int)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    oan = sub.add_parser("oan", help="organ-attention inference kernels")
    oan_sub = oan.add_subparsers(dest="action", required=True, parser_class=_Parser)
    stages = oan_sub.add_parser("fuse-stages", help="combine stage-I and stage-II probability maps")
    stages.add_argument("--p1", required=True)
    stages.add_argument("--p2", required=True)
    stages.add_argument("--rho", type=float, default=0.5)
    stages.add_argument("--out", required=True)
    stages.add_argument("--labels-out")
    stages.set_defaults(func=cmd_oan_fuse_stages)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"viewfusion: error: {exc}", file=sys.stderr)
        return 1
    except (ViewFusionError, OSError, ValueError) as exc:
        print(f"viewfusion: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
