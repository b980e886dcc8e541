"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import json
import math
import os

import numpy as np
import pytest

from conftest import record_acceptance
from oracles import convolve_naive, staple_reference, surface_distance_bruteforce
from viewfusion import cli
from viewfusion.fusion import (
    FusionConfig,
    compute_prior,
    e_step,
    init_theta,
    majority_vote,
    run_fusion,
    run_fusion_voi,
)
from viewfusion.io import read_volume, timing_path
from viewfusion.metrics import avg_surface_distance, dsc, evaluate
from viewfusion.oan import AttentionParams, attention_compose, cross_entropy, fuse_stage_probs
from viewfusion.phantom import corrupt_views, default_spec, gen_phantom, separated_spec
from viewfusion.ssim import SsimConfig, similarity_map, ssim_patch
from viewfusion.volume import LabelVolume, ScalarVolume


def _random_votes(rng, shape, L, M=3, flip=0.3):
    truth = rng.integers(0, L + 1, size=shape)
    votes = np.repeat(truth[None], M, axis=0)
    noise = rng.random(votes.shape) < flip
    votes[noise] = rng.integers(0, L + 1, size=int(noise.sum()))
    return votes


def test_criterion_1_staple_oracle_equivalence():
    rng = np.random.default_rng(1)
    cfg = FusionConfig(similarity="none")
    worst = 0.0
    for _ in range(200):
        shape = tuple(int(n) for n in rng.integers(2, 7, size=3))
        L = int(rng.integers(1, 4))
        votes = _random_votes(rng, shape, L)
        prior = rng.dirichlet(np.ones(L + 1), size=shape)
        theta0 = init_theta("uniform-diagonal", votes, diagonal=float(rng.uniform(0.6, 0.95)), num_labels=L)
        res = run_fusion(None, votes, cfg=cfg, prior=prior, theta0=theta0, num_labels=L)
        flat_votes = [v.ravel().tolist() for v in votes]
        ref_theta, ref_post, ref_iters = staple_reference(
            flat_votes, L, prior.reshape(-1, L + 1).tolist(), theta0.tolist()
        )
        assert res.iterations == ref_iters
        worst = max(
            worst,
            float(np.max(np.abs(res.theta - np.array(ref_theta)))),
            float(np.max(np.abs(res.posterior.probs.reshape(-1, L + 1) - np.array(ref_post)))),
        )
    ok = worst <= 1e-6
    record_acceptance(1, ok, f"200 instances, max |diff| theta/posterior = {worst:.3g} (tol 1e-6)")
    assert ok


def test_criterion_2_alpha_cancellation():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        shape = tuple(int(n) for n in rng.integers(2, 9, size=3))
        L = int(rng.integers(1, 5))
        votes = _random_votes(rng, shape, L)
        theta = rng.dirichlet(np.ones(L + 1), size=(3, L + 1)).transpose(0, 2, 1)
        prior = rng.dirichlet(np.ones(L + 1), size=shape)
        alpha = rng.uniform(1e-3, 1.0, size=votes.shape)
        diff = np.abs(e_step(votes, theta, prior, alpha) - e_step(votes, theta, prior))
        worst = max(worst, float(diff.max()))
    ok = worst <= 1e-12
    record_acceptance(2, ok, f"50 instances, max |posterior(alpha) - posterior(1)| = {worst:.3g} (tol 1e-12)")
    assert ok


def test_criterion_3_column_sums():
    rng = np.random.default_rng(3)
    worst_norm = 0.0
    max_paper = 0.0
    for _ in range(20):
        shape = (6, 6, 6)
        L = int(rng.integers(1, 4))
        votes = _random_votes(rng, shape, L)
        alpha = rng.uniform(0.2, 0.95, size=votes.shape)
        for mode in ("normalized", "paper"):
            cfg = FusionConfig(similarity="none", mstep_mode=mode, theta_init="uniform-diagonal")
            res = run_fusion(None, votes, cfg=cfg, alpha=alpha, num_labels=L)
            sums = np.array([t.sum(axis=1) for t in res.theta_history[1:]])
            if mode == "normalized":
                worst_norm = max(worst_norm, float(np.abs(sums - 1).max()))
            else:
                max_paper = max(max_paper, float(sums.max()))
    ok = worst_norm <= 1e-9 and max_paper <= 1.0
    record_acceptance(
        3, ok,
        f"normalized max |colsum - 1| = {worst_norm:.3g}; paper mode (alpha < 1) max colsum = {max_paper:.6g}",
    )
    assert ok


def test_criterion_4_fusion_beats_voting():
    spec = default_spec(0)
    volume, gt = gen_phantom(spec)
    segs, probs = corrupt_views(gt, spec)
    labels = range(1, gt.num_labels + 1)
    mv = evaluate(majority_vote(segs, compute_prior(probs)), gt, labels)
    lssf = evaluate(run_fusion(volume, segs, probs).labels, gt, labels)
    mean_mv = np.mean([r.dsc for r in mv])
    mean_lssf = np.mean([r.dsc for r in lssf])
    asd_ok = all(b.asd <= a.asd + 0.05 for a, b in zip(mv, lssf))
    ok = mean_lssf >= mean_mv and asd_ok
    per = ", ".join(f"s{a.label} asd {a.asd:.3f}->{b.asd:.3f}" for a, b in zip(mv, lssf))
    record_acceptance(4, ok, f"mean DSC MV {mean_mv:.2f} vs LSSF {mean_lssf:.2f}; {per}")
    assert ok


def test_criterion_5_metric_identities():
    rng = np.random.default_rng(5)
    worst = 0.0
    identities = True
    for _ in range(40):
        shape = tuple(int(n) for n in rng.integers(3, 13, size=3))
        spacing = tuple(float(s) for s in rng.choice([0.5, 0.8, 1.0, 2.5], size=3))
        a = rng.random(shape) < rng.uniform(0.2, 0.7)
        b = rng.random(shape) < rng.uniform(0.2, 0.7)
        a.flat[0] = b.flat[0] = True
        A = LabelVolume(a.astype(int), 1, spacing)
        B = LabelVolume(b.astype(int), 1, spacing)
        D = LabelVolume((~a).astype(int), 1, spacing)
        identities &= dsc(A, A, 1) == 100.0 and avg_surface_distance(A, A, 1) == 0.0
        if (~a).any():
            identities &= dsc(A, D, 1) == 0.0
        fast = avg_surface_distance(A, B, 1)
        slow = surface_distance_bruteforce(a.tolist(), b.tolist(), spacing)
        worst = max(worst, abs(fast - slow))
    ok = identities and worst <= 1e-9
    record_acceptance(5, ok, f"identities exact={identities}; ASD vs brute force max diff {worst:.3g} mm (tol 1e-9)")
    assert ok


def test_criterion_6_ssim_self_similarity():
    rng = np.random.default_rng(6)
    exact = True
    for axis, view in enumerate("XYZ"):
        plane_shape = [10, 11, 12]
        plane_shape[axis] = 1
        data = np.broadcast_to(rng.normal(50, 10, size=plane_shape), (10, 11, 12)).copy()
        vol = ScalarVolume(data, (0.5, 0.7, 1.5))
        pre = similarity_map(vol, view, clamp=False)
        post = similarity_map(vol, view)
        exact &= bool(np.all(pre == 1.0) and np.all(post == 1.0))
    worst = 0.0
    for _ in range(100):
        a, b = rng.uniform(-50, 50, size=2)
        c1, c2 = rng.uniform(1e-3, 10, size=2)
        cfg = SsimConfig(c1=c1, c2=c2)
        got = ssim_patch(np.full((9, 9, 1), a), np.full((9, 9, 9), b), cfg, clamp=False)
        worst = max(worst, abs(got - (2 * a * b + c1) / (a * a + b * b + c1)))
    ok = exact and worst <= 1e-12
    record_acceptance(6, ok, f"alpha == 1 exactly on view-constant volumes: {exact}; closed form max diff {worst:.3g}")
    assert ok


def test_criterion_7_oan_oracles():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        C = int(rng.integers(2, 6))
        k = int(rng.choice([1, 3, 5]))
        P = rng.dirichlet(np.ones(C), size=(8, 8))
        params = AttentionParams(rng.normal(size=(C, k, k)), float(rng.normal()))
        ref = np.array(convolve_naive(P.tolist(), params.kernel.tolist(), params.bias))
        worst = max(worst, float(np.abs(attention_compose(P, params) - ref).max()))
    ce = cross_entropy(np.full((6, 7, 14), 1 / 14), rng.integers(0, 14, size=(6, 7)))
    P1 = rng.dirichlet(np.ones(4), size=(16, 16))
    P2 = rng.dirichlet(np.ones(4), size=(16, 16))
    out = fuse_stage_probs(P1, P2, 0.3)
    pure = bool(np.all(np.all(out == P1, axis=-1) | np.all(out == P2, axis=-1)))
    ok = worst <= 1e-10 and abs(ce - math.log(14)) <= 1e-9 and pure
    record_acceptance(
        7, ok, f"conv vs naive {worst:.3g}; CE uniform-14 minus ln14 = {ce - math.log(14):.3g}; branch purity {pure}"
    )
    assert ok


def _cli_fuse(tmp, data, threads, extra=()):
    out = tmp / f"t{threads}"
    out.mkdir(exist_ok=True)
    argv = [
        "fuse", "--mode", "lssf", "--volume", str(data / "volume.vfv"),
        "--seg", *[str(data / f"seg_{v}.vfv") for v in "XYZ"],
        "--prob", *[str(data / f"prob_{v}.vfv") for v in "XYZ"],
        "--out", str(out / "labels.vfv"), "--posterior", str(out / "posterior.vfv"),
        "--theta", str(out / "theta.txt"), "--manifest", str(out / "manifest.json"),
        "--threads", str(threads), "--seed", "0", *extra,
    ]
    assert cli.main(argv) == 0
    return out


def test_criterion_8_determinism_and_voi(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["phantom", "gen", "--seed", "0", "--out-dir", str(data)]) == 0
    assert cli.main(["corrupt", "--gt", str(data / "gt.vfv"), "--seed", "0", "--out-dir", str(data)]) == 0
    one = _cli_fuse(tmp_path, data, 1)
    eight = _cli_fuse(tmp_path, data, 8)
    files = ("labels.vfv", "posterior.vfv", "theta.txt", "manifest.json")
    same = all((one / f).read_bytes() == (eight / f).read_bytes() for f in files)

    diffs = []
    for seed in (0, 1):
        spec = separated_spec(seed)
        volume, gt = gen_phantom(spec)
        segs, probs = corrupt_views(gt, spec)
        whole = run_fusion(volume, segs, probs)
        voi = run_fusion_voi(volume, segs, probs, threads=4)
        diffs.append(int(np.sum(whole.labels.labels != voi.labels.labels)))
    capsys.readouterr()
    ok = same and not any(diffs)
    record_acceptance(
        8, ok, f"threads 1 vs 8 byte-identical ({', '.join(files)}): {same}; VOI vs whole label diffs {diffs}"
    )
    assert ok


def test_criterion_9_throughput(tmp_path, capsys):
    spec = default_spec(0)
    spec = type(spec).from_dict({**spec.to_dict(), "dims": (128, 128, 128)})
    data = tmp_path / "data"
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(spec.dumps())
    assert cli.main(["phantom", "gen", "--spec", str(spec_path), "--out-dir", str(data)]) == 0
    assert cli.main(["corrupt", "--gt", str(data / "gt.vfv"), "--spec", str(spec_path), "--out-dir", str(data)]) == 0
    threads = os.cpu_count() or 1
    out = _cli_fuse(tmp_path, data, threads)
    capsys.readouterr()
    timing = json.loads(open(timing_path(out / "manifest.json")).read())
    assert read_volume(out / "labels.vfv").dims == (128, 128, 128)
    wall = timing["wall_time_s"]
    # informational only: the reference is an 8-core desktop
    record_acceptance(
        9, True,
        f"128^3, L=4, M=3 fused in {wall:.1f} s on {threads} core(s) "
        f"({'within' if wall <= 60 else 'over'} the 60 s guide; not gating)",
    )
