import numpy as np
import pytest

from oracles import bayes_posterior, staple_reference
from viewfusion.errors import AbsentLabelError, DegenerateVoxelError, GeometryMismatchError
from viewfusion.fusion import (
    FusionConfig,
    FusionResult,
    VoiFusionResult,
    compute_prior,
    e_step,
    init_theta,
    m_step,
    majority_vote,
    run_fusion,
    run_fusion_voi,
    structure_voi,
    voi_regions,
)
from viewfusion.metrics import dsc
from viewfusion.phantom import PhantomSpec, Primitive, ViewCorruption, corrupt_views, gen_phantom
from viewfusion.volume import LabelVolume, ProbVolume

NO_SSIM = FusionConfig(similarity="none")


def votes(*columns):
    """Stack per-view label lists into an ``(M, n, 1, 1)`` array."""
    return np.array(columns).reshape(len(columns), -1, 1, 1)


def test_config_validation():
    for bad in (dict(max_iters=0), dict(tol=0), dict(mstep_mode="x"), dict(prior_mode="x"),
                dict(theta_init="x"), dict(similarity="x"), dict(voi_margin=-1)):
        with pytest.raises(ValueError):
            FusionConfig(**bad)
    assert FusionConfig().to_dict()["ssim"]["clamp_floor"] == 1e-3


def test_prior_identical_probs(rng):
    p = rng.dirichlet(np.ones(3), size=(2, 2, 2))
    vols = [ProbVolume(p) for _ in range(3)]
    np.testing.assert_allclose(compute_prior(vols), p, atol=1e-15)


def test_prior_vote_frequency():
    np.testing.assert_array_equal(compute_prior(votes([2], [2], [2]), "vote-frequency", eps=0.0)[0, 0, 0], [0, 0, 1])
    got = compute_prior(votes([1], [1], [0]), "vote-frequency", eps=1e-3)[0, 0, 0]
    np.testing.assert_allclose(got, [1.001 / 3.002, 2.001 / 3.002], rtol=1e-15)
    np.testing.assert_allclose(got, [0.3337, 0.6663], atol=5e-4)


def test_prior_geometry_mismatch():
    with pytest.raises(GeometryMismatchError):
        compute_prior([np.full((2, 2, 2, 2), 0.5), np.full((2, 2, 3, 2), 0.5)])


def test_init_uniform_diagonal():
    theta = init_theta("uniform-diagonal", votes([0, 1], [1, 1]), diagonal=0.8)
    np.testing.assert_allclose(theta[0], [[0.8, 0.2], [0.2, 0.8]])
    with pytest.raises(ValueError):
        init_theta("uniform-diagonal", votes([0, 1], [1, 1]), diagonal=0.4)


def test_init_from_reference_counts():
    seg = votes([0, 0, 1, 1, 1, 0])
    ref = np.array([0, 0, 0, 1, 1, 1]).reshape(6, 1, 1)
    np.testing.assert_allclose(init_theta("from-reference", seg, ref, eps=0.0)[0], [[2 / 3, 1 / 3], [1 / 3, 2 / 3]])
    smoothed = init_theta("from-reference", seg, ref, eps=1e-3)[0]
    np.testing.assert_allclose(smoothed[0, 0], 2.001 / 3.002)
    identical = init_theta("from-reference", ref[None], ref, eps=1e-3)[0]
    assert np.all(np.diag(identical) > 0.99)
    with pytest.raises(ValueError):
        init_theta("from-reference", seg)


def test_init_from_mv_uses_vote():
    seg = votes([0, 1, 1], [0, 1, 0], [0, 1, 1])
    theta = init_theta("from-mv", seg, eps=0.0)
    np.testing.assert_allclose(theta[1], [[1, 0.5], [0, 0.5]])


def test_e_step_identity_rater():
    post = e_step(votes([2, 0, 1]), np.eye(3)[None], np.full((3, 1, 1, 3), 1 / 3))
    np.testing.assert_array_equal(post[:, 0, 0], np.eye(3)[[2, 0, 1]])


def test_e_step_symmetric_pair():
    theta = np.array([[[0.9, 0.1], [0.1, 0.9]]] * 2)
    post = e_step(votes([1], [0]), theta, np.full((1, 1, 1, 2), 0.5))
    np.testing.assert_allclose(post[0, 0, 0], [0.5, 0.5], atol=1e-15)


def test_e_step_matches_bayes_enumeration(rng):
    S = rng.integers(0, 4, size=(3, 3, 2, 2))
    theta = rng.dirichlet(np.ones(4), size=(3, 4)).transpose(0, 2, 1)
    prior = rng.dirichlet(np.ones(4), size=(3, 2, 2))
    post = e_step(S, theta, prior)
    for idx in np.ndindex(3, 2, 2):
        ref = bayes_posterior([int(S[(j,) + idx]) for j in range(3)], prior[idx].tolist(), theta.tolist())
        np.testing.assert_allclose(post[idx], ref, atol=1e-14)


def test_e_step_degenerate_voxel():
    theta = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]])
    with pytest.raises(DegenerateVoxelError) as info:
        e_step(votes([0, 1], [0, 0]), theta, np.full((2, 1, 1, 2), 0.5))
    assert info.value.index == (1, 0, 0)


def test_m_step_trivial_cases():
    S = votes([0, 1, 2, 1])
    W = np.eye(3)[S[0]]
    np.testing.assert_allclose(m_step(S, W), np.eye(3)[None])
    half = np.full(S.shape, 0.5)
    np.testing.assert_allclose(m_step(S, W, half, mode="paper"), 0.5 * np.eye(3)[None])
    np.testing.assert_allclose(m_step(S, W, half, mode="normalized"), np.eye(3)[None])


def test_m_step_absent_label():
    S = votes([0, 0])
    W = np.eye(3)[S[0]]
    with pytest.raises(AbsentLabelError):
        m_step(S, W)
    prev = np.full((1, 3, 3), 1 / 3)
    out = m_step(S, W, previous=prev)
    np.testing.assert_array_equal(out[0][:, 1:], prev[0][:, 1:])


def test_m_step_matches_reference(rng):
    S = rng.integers(0, 3, size=(3, 6, 6, 6))
    theta0 = init_theta("uniform-diagonal", S, diagonal=0.7)
    prior = np.full((6, 6, 6, 3), 1 / 3)
    got = m_step(S, e_step(S, theta0, prior))
    ref, _, _ = staple_reference([s.ravel().tolist() for s in S], 2, prior.reshape(-1, 3).tolist(),
                                 theta0.tolist(), max_iters=1)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_majority_vote_rules():
    np.testing.assert_array_equal(majority_vote(votes([2], [2], [0]))[:, 0, 0], [2])
    np.testing.assert_array_equal(majority_vote(votes([1], [2], [0]))[:, 0, 0], [0])
    prior = np.array([0.2, 0.3, 0.5]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(majority_vote(votes([1], [2], [0]), prior)[:, 0, 0], [2])
    np.testing.assert_array_equal(majority_vote(votes([1], [1], [1]))[:, 0, 0], [1])


def test_majority_vote_geometry_mismatch():
    a = LabelVolume(np.zeros((2, 2, 2), int), 1)
    b = LabelVolume(np.zeros((2, 2, 2), int), 1, spacing=(2, 1, 1))
    with pytest.raises(GeometryMismatchError):
        majority_vote([a, b])


def test_structure_voi_boxes():
    S = np.zeros((2, 32, 32, 32), int)
    S[0, 16, 16, 16] = 1
    box = structure_voi(S, 1, 4)
    assert tuple(s.stop - s.start for s in box) == (9, 9, 9)
    S[1, 0, 0, 0] = 2
    assert tuple(s.stop - s.start for s in structure_voi(S, 2, 4)) == (5, 5, 5)
    assert structure_voi(S, 3, 4) is None


def test_voi_regions_partition():
    boxes = {1: (slice(0, 3),) * 3, 2: (slice(2, 5),) * 3}
    regions = voi_regions(boxes, (6, 6, 6))
    flat = np.concatenate(regions)
    assert len(regions) == 3
    assert np.array_equal(np.sort(flat), np.arange(216))


def test_run_fusion_unanimous(rng):
    seg = LabelVolume(rng.integers(0, 3, size=(5, 5, 5)), 2)
    res = run_fusion(None, [seg] * 3, cfg=NO_SSIM)
    assert isinstance(res, FusionResult)
    np.testing.assert_array_equal(res.labels.labels, seg.labels)
    for t in res.theta:
        assert np.all(np.diag(t) > t.max(axis=0) - 1e-12)


def test_run_fusion_reference_staple(rng):
    S = rng.integers(0, 3, size=(3, 6, 6, 6))
    cfg = FusionConfig(similarity="none", prior_mode="uniform", theta_init="uniform-diagonal")
    res = run_fusion(None, S, cfg=cfg)
    theta0 = init_theta("uniform-diagonal", S, diagonal=0.9)
    prior = [[1 / 3] * 3] * 216
    ref_theta, ref_post, iters = staple_reference([s.ravel().tolist() for s in S], 2, prior, theta0.tolist())
    assert res.iterations == iters
    np.testing.assert_allclose(res.theta, ref_theta, atol=1e-6)
    np.testing.assert_allclose(res.posterior.probs.reshape(-1, 3), ref_post, atol=1e-6)


def test_run_fusion_view_order_invariant(rng):
    S = rng.integers(0, 3, size=(3, 6, 5, 4))
    alpha = rng.uniform(0.1, 1, size=S.shape)
    a = run_fusion(None, S, cfg=NO_SSIM, alpha=alpha)
    order = [2, 0, 1]
    b = run_fusion(None, S[order], cfg=NO_SSIM, alpha=alpha[order])
    np.testing.assert_array_equal(a.labels.labels, b.labels.labels)
    np.testing.assert_allclose(a.theta[order], b.theta, atol=1e-12)


def test_run_fusion_needs_two_views():
    with pytest.raises(ValueError):
        run_fusion(None, np.zeros((1, 2, 2, 2), int), cfg=NO_SSIM)


def test_frozen_label_column_kept():
    S = np.zeros((3, 4, 4, 4), int)
    S[:, :2] = 1
    theta0 = init_theta("uniform-diagonal", S, diagonal=0.8, num_labels=2)
    res = run_fusion(None, S, cfg=NO_SSIM, theta0=theta0, num_labels=2)
    np.testing.assert_array_equal(res.theta[:, :, 2], theta0[:, :, 2])


def test_posterior_rows_normalised(rng):
    S = rng.integers(0, 4, size=(3, 5, 5, 5))
    res = run_fusion(None, S, cfg=NO_SSIM, alpha=rng.uniform(0.1, 1, size=S.shape))
    np.testing.assert_allclose(res.posterior.probs.sum(axis=-1), 1.0, atol=1e-12)


def _tiny_phantom(seed):
    spec = PhantomSpec(
        seed=seed, dims=(8, 8, 8), noise_sigma=2.0,
        structures=(Primitive("ellipsoid", (1.75, 1.75, 1.75), (1.3, 1.1, 1.4), 60.0),),
        corruptions=(ViewCorruption("Z", boundary_jitter_mm=0.5, slice_dropout_prob=0.5),),
    )
    volume, gt = gen_phantom(spec)
    return volume, gt, *corrupt_views(gt, spec)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_corrupted_view_fusion_not_worse_than_vote(seed):
    volume, gt, segs, probs = _tiny_phantom(seed)
    fused = run_fusion(volume, segs, probs)
    mv = majority_vote(segs, compute_prior(probs))
    assert dsc(fused.labels, gt, 1) >= dsc(mv, gt, 1)
    assert dsc(segs[2], gt, 1) < 100


def test_run_fusion_deterministic():
    volume, gt, segs, probs = _tiny_phantom(4)
    a = run_fusion(volume, segs, probs)
    b = run_fusion(volume, segs, probs, threads=3)
    assert np.array_equal(a.posterior.probs, b.posterior.probs)
    assert np.array_equal(a.theta, b.theta)


def test_voi_modes(rng):
    S = np.zeros((3, 20, 20, 20), int)
    S[:, 2:6, 2:6, 2:6] = 1
    S[:, 12:17, 12:16, 13:18] = 2
    S[1, 2, 2:6, 2:6] = 0
    S[2, 12:17, 12, 13:18] = 0
    alpha = rng.uniform(0.5, 1, size=S.shape)
    whole = run_fusion(None, S, cfg=NO_SSIM, alpha=alpha)
    shared = run_fusion_voi(None, S, cfg=NO_SSIM, alpha=alpha, threads=2)
    assert set(shared.boxes) == {1, 2}
    np.testing.assert_array_equal(whole.labels.labels, shared.labels.labels)
    np.testing.assert_allclose(whole.theta, shared.theta, atol=1e-12)
    indep = run_fusion_voi(None, S, cfg=NO_SSIM, alpha=alpha, shared_theta=False)
    assert isinstance(indep, VoiFusionResult)
    np.testing.assert_array_equal(indep.labels.labels, whole.labels.labels)
    assert indep.converged and indep.iterations >= 1
