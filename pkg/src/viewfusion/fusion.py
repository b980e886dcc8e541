"""Similarity-weighted EM label fusion (a STAPLE variant) and the voting baseline.

Notation used in the code:

* ``seg`` -- stacked view segmentations, int array ``(M, *shape)``
* ``theta`` -- performance levels ``(M, K, K)``; ``theta[j, r, s]`` is the
  probability that view ``j`` reports ``r`` when the truth is ``s``
* ``prior``/``posterior`` -- ``(*shape, K)`` with ``K = num_labels + 1``
* ``alpha`` -- similarity weights ``(M, *shape)``

Public functions accept either lists of :class:`LabelVolume` /
:class:`ProbVolume` or the equivalent arrays.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AbsentLabelError, DegenerateVoxelError, GeometryMismatchError, VolumeError
from .ssim import SsimConfig, similarity_map
from .volume import VIEWS, LabelVolume, ProbVolume

log = logging.getLogger(__name__)

MSTEP_MODES = ("paper", "normalized")
PRIOR_MODES = ("mean-prob", "vote-frequency", "uniform")
THETA_INITS = ("uniform-diagonal", "from-reference", "from-mv")


@dataclass(frozen=True)
class FusionConfig:
    """EM settings.

    ``tol`` bounds the max-abs change of ``theta`` between iterations.
    ``similarity`` selects the per-view weights: ``"ssim"`` for the
    structural-similarity maps, ``"none"`` for plain STAPLE (weights 1).
    """

    max_iters: int = 50
    tol: float = 1e-4
    mstep_mode: str = "paper"
    prior_mode: str = "mean-prob"
    theta_init: str = "from-mv"
    init_diagonal: float = 0.9
    voi_margin: int = 4
    prior_eps: float = 1e-3
    count_eps: float = 1e-3
    similarity: str = "ssim"
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.mstep_mode not in MSTEP_MODES:
            raise ValueError(f"mstep_mode must be one of {MSTEP_MODES}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.theta_init not in THETA_INITS:
            raise ValueError(f"theta_init must be one of {THETA_INITS}")
        if self.similarity not in ("ssim", "none"):
            raise ValueError("similarity must be 'ssim' or 'none'")
        if self.voi_margin < 0 or self.prior_eps < 0 or self.count_eps < 0:
            raise ValueError("voi_margin, prior_eps and count_eps must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class FusionResult:
    posterior: ProbVolume
    theta: np.ndarray
    labels: LabelVolume
    iterations: int
    converged: bool
    deltas: list = field(default_factory=list)
    theta_history: list = field(default_factory=list)
    boxes: dict | None = None


@dataclass
class VoiFusionResult:
    """Per-structure fusion merged back into the full grid."""

    posterior: ProbVolume
    labels: LabelVolume
    boxes: dict
    results: dict

    @property
    def iterations(self):
        return max((r.iterations for r in self.results.values()), default=0)

    @property
    def converged(self):
        return all(r.converged for r in self.results.values())


def _stack_labels(seg):
    """``(M, *shape)`` int array, label count and a geometry template (or None)."""
    if isinstance(seg, np.ndarray):
        return seg.astype(np.intp, copy=False), int(seg.max(initial=0)), None
    seg = list(seg)
    if not seg:
        raise VolumeError("at least one segmentation is required")
    ref = seg[0]
    for s in seg[1:]:
        ref.check_geometry(s, "segmentations")
        if s.num_labels != ref.num_labels:
            raise GeometryMismatchError("segmentations disagree on num_labels")
    return np.stack([s.labels for s in seg]).astype(np.intp), ref.num_labels, ref


def _prob_array(p):
    return p.probs if isinstance(p, ProbVolume) else np.asarray(p, dtype=np.float64)


def compute_prior(inputs, mode="mean-prob", eps=1e-3, num_labels=None):
    """Per-voxel label prior from the view outputs.

    ``mean-prob`` averages per-view probability volumes; ``vote-frequency``
    uses ``(count + eps) / (M + K eps)`` over hard labels; ``uniform`` is
    ``1 / K`` everywhere.
    """
    inputs = list(inputs) if not isinstance(inputs, np.ndarray) else inputs
    if mode == "mean-prob":
        if isinstance(inputs, np.ndarray):
            return inputs.astype(np.float64).mean(axis=0)
        arrays = [_prob_array(p) for p in inputs]
        if len({a.shape for a in arrays}) != 1:
            raise GeometryMismatchError("probability volumes differ in shape")
        for p in inputs[1:]:
            if isinstance(p, ProbVolume) and isinstance(inputs[0], ProbVolume):
                inputs[0].check_geometry(p, "probability volumes")
        return np.mean(arrays, axis=0)
    S, L, _ = _stack_labels(inputs)
    if num_labels is not None:
        L = num_labels
    K = L + 1
    if mode == "uniform":
        return np.full(S.shape[1:] + (K,), 1.0 / K)
    if mode != "vote-frequency":
        raise ValueError(f"unknown prior mode {mode!r}")
    M = S.shape[0]
    counts = np.stack([(S == s).sum(axis=0) for s in range(K)], axis=-1).astype(np.float64)
    return (counts + eps) / (M + K * eps)


def majority_vote(seg, prior=None, num_labels=None):
    """Per-voxel modal label.

    Ties go to the candidate with the higher prior probability, then to the
    lower label index. Returns a :class:`LabelVolume` for volume input and
    an array otherwise.
    """
    S, L, ref = _stack_labels(seg)
    if num_labels is not None:
        L = num_labels
    K = L + 1
    counts = np.stack([(S == s).sum(axis=0) for s in range(K)], axis=-1)
    candidates = counts == counts.max(axis=-1, keepdims=True)
    if prior is None:
        score = np.zeros(counts.shape)
    else:
        score = _prob_array(prior)
        if score.shape != counts.shape:
            raise GeometryMismatchError(f"prior shape {score.shape} does not match {counts.shape}")
    labels = np.argmax(np.where(candidates, score, -np.inf), axis=-1)
    return ref.with_labels(labels) if ref is not None else labels


def _confusion(S, reference, K, eps):
    ref = np.asarray(reference).ravel()
    theta = np.empty((S.shape[0], K, K))
    for j in range(S.shape[0]):
        counts = np.zeros((K, K))
        np.add.at(counts, (S[j].ravel(), ref), 1.0)
        counts += eps
        total = counts.sum(axis=0, keepdims=True)
        theta[j] = np.where(total > 0, counts / np.where(total > 0, total, 1.0), 1.0 / K)
    return theta


def init_theta(mode, seg, reference=None, diagonal=0.9, eps=1e-3, num_labels=None):
    """Initial performance levels.

    ``uniform-diagonal`` puts ``diagonal`` on the diagonal and spreads the
    rest evenly; ``from-reference`` and ``from-mv`` column-normalise the
    confusion counts of each view against a reference (given, or the
    majority vote) after adding ``eps`` to every cell.
    """
    S, L, _ = _stack_labels(seg)
    if num_labels is not None:
        L = num_labels
    K = L + 1
    M = S.shape[0]
    if mode == "uniform-diagonal":
        if K == 1:
            return np.ones((M, 1, 1))
        if not 1.0 / K < diagonal < 1.0:
            raise ValueError(f"diagonal must lie in (1/{K}, 1), got {diagonal}")
        theta = np.full((M, K, K), (1.0 - diagonal) / L)
        theta[:, np.arange(K), np.arange(K)] = diagonal
        return theta
    if mode == "from-reference":
        if reference is None:
            raise ValueError("from-reference initialisation needs a reference segmentation")
        ref = reference.labels if isinstance(reference, LabelVolume) else np.asarray(reference)
        if ref.shape != S.shape[1:]:
            raise GeometryMismatchError("reference does not match the segmentations")
    elif mode == "from-mv":
        ref = majority_vote(S, num_labels=L)
    else:
        raise ValueError(f"unknown theta init {mode!r}")
    return _confusion(S, ref, K, eps)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def e_step(seg, theta, prior, alpha=None):
    """Posterior truth probabilities, evaluated in log space.

    Each view contributes ``theta[j, S_j, s] * alpha_j`` to hypothesis
    ``s``. Because ``alpha_j`` does not depend on ``s`` it cancels in the
    normalisation; it is still applied literally.
    """
    S, _, _ = _stack_labels(seg)
    prior = _prob_array(prior)
    theta = np.asarray(theta, dtype=np.float64)
    if prior.shape != S.shape[1:] + (theta.shape[1],):
        raise GeometryMismatchError(f"prior shape {prior.shape} does not match segmentations {S.shape}")
    log_post = _log(prior).copy()
    log_theta = _log(theta)
    for j in range(S.shape[0]):
        log_post += log_theta[j][S[j]]
        if alpha is not None:
            log_post += _log(np.asarray(alpha[j], dtype=np.float64))[..., None]
    peak = log_post.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        bad = np.argwhere(~np.isfinite(peak[..., 0]))[0]
        raise DegenerateVoxelError(bad)
    w = np.exp(log_post - peak)
    return w / w.sum(axis=-1, keepdims=True)


def _mstep_sums(S, W, alpha):
    """Alpha-weighted report counts ``(M, K, K)`` and posterior mass ``(K,)`` of flat inputs."""
    M = S.shape[0]
    K = W.shape[-1]
    num = np.empty((M, K, K))
    for j in range(M):
        Wj = W if alpha is None else W * alpha[j][:, None]
        for r in range(K):
            num[j, r] = Wj[S[j] == r].sum(axis=0)
    return num, W.sum(axis=0)


def _theta_from_sums(num, mass, mode, previous=None, frozen=None):
    K = num.shape[-1]
    theta = num.copy()
    keep = np.ones(K, bool) if frozen is None else ~np.asarray(frozen, bool)
    for j in range(num.shape[0]):
        denom = mass if mode == "paper" else num[j].sum(axis=0)
        vanished = keep & (denom <= 0)
        if vanished.any() and previous is None:
            raise AbsentLabelError(np.flatnonzero(vanished))
        ok = keep & ~vanished
        theta[j][:, ok] /= denom[ok]
        if (~ok).any():
            theta[j][:, ~ok] = np.asarray(previous)[j][:, ~ok]
    return theta


def m_step(seg, posterior, alpha=None, mode="paper", previous=None, frozen=None):
    """Re-estimate ``theta`` from the posterior.

    ``paper`` divides the alpha-weighted counts by the plain posterior mass
    of each truth label; ``normalized`` divides by the alpha-weighted mass so
    every column sums to one. Columns flagged in ``frozen`` (or whose mass
    vanished) are copied from ``previous``; without ``previous`` a vanished
    column raises :class:`AbsentLabelError`.
    """
    if mode not in MSTEP_MODES:
        raise ValueError(f"mstep mode must be one of {MSTEP_MODES}")
    S, _, _ = _stack_labels(seg)
    W = np.asarray(posterior, dtype=np.float64)
    K = W.shape[-1]
    S = S.reshape(S.shape[0], -1)
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=np.float64).reshape(S.shape)
    num, mass = _mstep_sums(S, W.reshape(-1, K), alpha)
    return _theta_from_sums(num, mass, mode, previous, frozen)


def structure_voi(seg, label, margin=4):
    """Bounding box of ``label`` across all views, grown by ``margin`` voxels.

    Returns a tuple of slices clipped to the volume, or ``None`` when no
    view contains the label.
    """
    S, L, _ = _stack_labels(seg)
    if label < 1:
        raise ValueError("structure label must be >= 1")
    present = np.any(S == label, axis=0)
    if not present.any():
        return None
    box = []
    for axis, n in enumerate(present.shape):
        other = tuple(a for a in range(present.ndim) if a != axis)
        idx = np.flatnonzero(present.any(axis=other))
        box.append(slice(max(int(idx[0]) - margin, 0), min(int(idx[-1]) + margin + 1, n)))
    return tuple(box)


def _default_views(M):
    if M == 3:
        return VIEWS
    raise ValueError(f"pass `views` (or `alpha`) explicitly for {M} segmentations")


def compute_alpha(volume, views, cfg, threads=1):
    """Similarity weights ``(M, *shape)`` for the given view sequence."""
    if cfg.similarity == "none":
        return np.ones((len(views),) + volume.dims)
    maps = similarity_map(volume, "all", cfg.ssim, threads=threads)
    index = {v: k for k, v in enumerate(VIEWS)}
    return np.stack([maps[..., index[str(v).upper()]] for v in views])


def _em(S, prior, alpha, theta0, cfg, frozen, regions=None, threads=1):
    """EM over flat inputs: ``S (M, N)``, ``prior (N, K)``, ``alpha (M, N)``.

    ``regions`` partitions the voxels into index arrays whose E-steps and
    M-step sums are evaluated independently (concurrently with ``threads``)
    and reduced in list order, so the outcome does not depend on
    ``threads``. A :class:`DegenerateVoxelError` carries the flat index.
    """
    if regions is None:
        regions = [None]
        parts = [(S, prior, alpha)]
    else:
        parts = [(S[:, r], prior[r], alpha[:, r]) for r in regions]

    def one(k, theta):
        Sp, Pp, Ap = parts[k]
        try:
            return e_step(Sp, theta, Pp, Ap)
        except DegenerateVoxelError as exc:
            local = exc.index[0]
            raise DegenerateVoxelError((local if regions[k] is None else regions[k][local],)) from None

    def estep(theta):
        ks = range(len(parts))
        if threads > 1 and len(parts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(lambda k: one(k, theta), ks))
        return [one(k, theta) for k in ks]

    theta = theta0
    deltas = []
    history = [theta0.copy()]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        posts = estep(theta)
        num = np.zeros(theta.shape)
        mass = np.zeros(theta.shape[-1])
        for (Sp, _, Ap), w in zip(parts, posts):
            n, m = _mstep_sums(Sp, w, Ap)
            num += n
            mass += m
        new = _theta_from_sums(num, mass, cfg.mstep_mode, previous=theta, frozen=frozen)
        delta = float(np.max(np.abs(new - theta)))
        deltas.append(delta)
        theta = new
        history.append(theta.copy())
        if delta < cfg.tol:
            converged = True
            break
    posts = estep(theta)
    if regions[0] is None:
        posterior = posts[0]
    else:
        posterior = np.empty(prior.shape)
        for r, w in zip(regions, posts):
            posterior[r] = w
    return posterior, theta, iterations, converged, deltas, history


def _prepare(volume, seg, probs, cfg, alpha, prior, views, num_labels, threads):
    S, L, ref = _stack_labels(seg)
    if num_labels is not None:
        L = num_labels
    if S.shape[0] < 2:
        raise ValueError("fusion needs at least two segmentations")
    if ref is not None and volume is not None:
        ref.check_geometry(volume, "volume and segmentations")
    if alpha is None:
        if cfg.similarity == "none":
            alpha = np.ones(S.shape)
        else:
            if volume is None:
                raise ValueError("a volume is needed to compute similarity weights")
            alpha = compute_alpha(volume, views or _default_views(S.shape[0]), cfg, threads)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != S.shape:
        raise GeometryMismatchError(f"alpha shape {alpha.shape} does not match {S.shape}")
    if prior is None:
        if cfg.prior_mode == "mean-prob" and probs is not None:
            prior = compute_prior(probs, "mean-prob")
        else:
            mode = "vote-frequency" if cfg.prior_mode == "mean-prob" else cfg.prior_mode
            prior = compute_prior(S, mode, cfg.prior_eps, num_labels=L)
    prior = _prob_array(prior)
    if prior.shape != S.shape[1:] + (L + 1,):
        raise GeometryMismatchError(f"prior shape {prior.shape} does not match segmentations {S.shape}")
    if ref is not None:
        geometry = ref.spacing, ref.origin
    elif volume is not None:
        geometry = volume.spacing, volume.origin
    else:
        geometry = (1.0,) * 3, (0.0,) * 3
    return S, L, alpha, prior, geometry


def _fuse(S, L, alpha, prior, geometry, cfg, theta0, reference, regions, threads):
    K = L + 1
    shape = S.shape[1:]
    if theta0 is None:
        theta0 = init_theta(cfg.theta_init, S, reference, cfg.init_diagonal, cfg.count_eps, num_labels=L)
    theta0 = np.asarray(theta0, dtype=np.float64)
    frozen = np.array([not np.any(S == s) for s in range(K)])
    M = S.shape[0]
    try:
        posterior, theta, iterations, converged, deltas, history = _em(
            S.reshape(M, -1), prior.reshape(-1, K), alpha.reshape(M, -1), theta0, cfg, frozen,
            regions=regions, threads=threads,
        )
    except DegenerateVoxelError as exc:
        raise DegenerateVoxelError(np.unravel_index(exc.index[0], shape)) from None
    log.debug("fusion finished after %d iterations (converged=%s)", iterations, converged)
    posterior = posterior.reshape(shape + (K,))
    spacing, origin = geometry
    return FusionResult(
        posterior=ProbVolume(posterior, spacing, origin),
        theta=theta,
        labels=LabelVolume(np.argmax(posterior, axis=-1), L, spacing, origin),
        iterations=iterations,
        converged=converged,
        deltas=deltas,
        theta_history=history,
    )


def run_fusion(volume, seg, probs=None, cfg=None, *, alpha=None, prior=None, theta0=None,
               reference=None, views=None, num_labels=None, threads=1):
    """Fuse ``M >= 2`` view segmentations of ``volume``.

    ``alpha``, ``prior`` and ``theta0`` override the values the config would
    compute. Without probability volumes the ``mean-prob`` prior falls back
    to vote frequencies. Labels are the per-voxel argmax of the final
    posterior, ties to the lowest label.
    """
    cfg = cfg or FusionConfig()
    S, L, alpha, prior, geometry = _prepare(volume, seg, probs, cfg, alpha, prior, views, num_labels, threads)
    return _fuse(S, L, alpha, prior, geometry, cfg, theta0, reference, None, threads)


def voi_regions(boxes, shape):
    """Disjoint flat-index regions: each box minus earlier boxes (label order), then the rest."""
    owner = np.full(shape, -1, dtype=np.intp)
    order = sorted(boxes)
    for k, s in enumerate(order):
        view = owner[boxes[s]]
        view[view < 0] = k
    flat = owner.ravel()
    regions = [np.flatnonzero(flat == k) for k in range(len(order))]
    regions.append(np.flatnonzero(flat < 0))
    return [r for r in regions if r.size]


def run_fusion_voi(volume, seg, probs=None, cfg=None, *, alpha=None, views=None, threads=1,
                   shared_theta=True):
    """Fusion organised around one box per structure (see :func:`structure_voi`).

    By default the grid is split into the structure boxes plus the
    remainder; E-steps and M-step sums run per region (concurrently on
    ``threads`` workers) and are reduced into one shared ``theta``, so the
    labels match :func:`run_fusion` up to floating-point summation order.
    The returned :class:`FusionResult` gains a ``boxes`` attribute.

    With ``shared_theta=False`` every box runs its own multi-label EM with
    box-local statistics. A voxel then takes label ``s`` when the run for
    ``s`` labels it so; where several runs claim it the larger posterior for
    the claimed label wins (lower label on ties), and voxels outside every
    box are background with the prior as posterior.
    """
    cfg = cfg or FusionConfig()
    S, L, alpha, prior, geometry = _prepare(volume, seg, probs, cfg, alpha, None, views, None, threads)
    boxes = {}
    for s in range(1, L + 1):
        box = structure_voi(S, s, cfg.voi_margin)
        if box is not None:
            boxes[s] = box
    if shared_theta:
        regions = voi_regions(boxes, S.shape[1:])
        result = _fuse(S, L, alpha, prior, geometry, cfg, None, None, regions, threads)
        result.boxes = boxes
        return result
    return _independent_voi(S, L, alpha, prior, geometry, cfg, boxes, threads)


def _independent_voi(S, L, alpha, prior, geometry, cfg, boxes, threads):
    def one(s):
        box = boxes[s]
        sub = (slice(None),) + box
        return _fuse(S[sub], L, alpha[sub], prior[box], geometry, cfg, None, None, None, 1)

    order = sorted(boxes)
    if threads > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = dict(zip(order, pool.map(one, order)))
    else:
        runs = {s: one(s) for s in order}

    shape = S.shape[1:]
    labels = np.zeros(shape, dtype=np.intp)
    posterior = prior.copy()
    written = np.zeros(shape, bool)
    claim = np.full(shape, -np.inf)
    for s in order:
        box = boxes[s]
        post = runs[s].posterior.probs
        mine = runs[s].labels.labels == s
        cbox = claim[box]
        better = mine & (post[..., s] > cbox)
        fresh = ~written[box] & ~better
        pbox = posterior[box]
        pbox[fresh] = post[fresh]
        pbox[better] = post[better]
        labels[box][better] = s
        cbox[better] = post[..., s][better]
        written[box] = True
    spacing, origin = geometry
    return VoiFusionResult(
        posterior=ProbVolume(posterior, spacing, origin),
        labels=LabelVolume(labels, L, spacing, origin),
        boxes=boxes,
        results=runs,
    )
