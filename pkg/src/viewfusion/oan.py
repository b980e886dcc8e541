"""Inference-time and loss arithmetic of the two-stage organ-attention network.

Everything here is a pure function of supplied maps. Maps are ``(H, W, C)``
arrays with ``C = num_labels + 1`` channels (channel 0 is background);
label images are ``(H, W)`` integer arrays. The same functions accept a
leading volume shape (e.g. ``(nx, ny, nz, C)``) wherever only per-pixel
arithmetic is involved.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NumericError, ShapeError

LOG_EPS = 1e-12


@dataclass
class AttentionParams:
    """Convolution weights ``(C, kh, kw)`` and scalar bias of the attention module."""

    kernel: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 3:
            raise ShapeError(f"attention kernel must be (channels, kh, kw), got {self.kernel.shape}")
        if self.kernel.shape[1] % 2 == 0 or self.kernel.shape[2] % 2 == 0:
            raise ShapeError(f"attention kernel spatial size must be odd, got {self.kernel.shape[1:]}")

    @classmethod
    def identity(cls, channels, channel=0):
        """1x1 kernel passing ``channel`` through unchanged."""
        kernel = np.zeros((channels, 1, 1))
        kernel[channel] = 1.0
        return cls(kernel, 0.0)


@dataclass
class FusionWeights:
    """Non-negative weights of the loss and activation fusion terms."""

    h1: float = 1.0
    h2: float = 1.0
    h_r: np.ndarray = None
    h_b: np.ndarray = None
    h_side: dict = field(default_factory=lambda: {4: 1.0, 5: 1.0, 6: 1.0, 7: 1.0})
    h_b1: float = 1.0
    h_s1: float = 1.0
    h_f1: float = 1.0

    def __post_init__(self):
        scalars = [self.h1, self.h2, self.h_b1, self.h_s1, self.h_f1, *self.h_side.values()]
        arrays = [np.asarray(a) for a in (self.h_r, self.h_b) if a is not None]
        if any(v < 0 for v in scalars) or any(np.any(a < 0) for a in arrays):
            raise ValueError("fusion weights must be non-negative")


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} contains NaN or Inf")


def _check_labels(P, T):
    T = np.asarray(T)
    if T.shape != P.shape[:-1]:
        raise ShapeError(f"label image shape {T.shape} does not match map shape {P.shape[:-1]}")
    if T.size and (T.min() < 0 or T.max() >= P.shape[-1]):
        raise ShapeError(f"labels must lie in 0..{P.shape[-1] - 1}")
    return T.astype(np.intp)


def softmax_map(A):
    """Channel-wise softmax of an activation map."""
    A = np.asarray(A, dtype=np.float64)
    _check_finite(A, "activation map")
    shifted = A - A.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _true_label_log_probs(P, T):
    p = np.take_along_axis(np.asarray(P, dtype=np.float64), T[..., None], axis=-1)[..., 0]
    return np.log(np.maximum(p, LOG_EPS))


def cross_entropy(P, T):
    """Mean negative log-probability of the true label over all pixels."""
    P = np.asarray(P, dtype=np.float64)
    T = _check_labels(P, T)
    return float(-_true_label_log_probs(P, T).sum() / T.size)


def masked_cross_entropy(P2, T, P1_bg, rho):
    """Stage-II loss over pixels whose stage-I background probability is <= ``rho``.

    Normalised by the total pixel count, not by the mask size.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    P2 = np.asarray(P2, dtype=np.float64)
    T = _check_labels(P2, T)
    P1_bg = np.asarray(P1_bg, dtype=np.float64)
    if P1_bg.shape != T.shape:
        raise ShapeError(f"background map shape {P1_bg.shape} does not match {T.shape}")
    mask = P1_bg <= rho
    return float(-(_true_label_log_probs(P2, T) * mask).sum() / T.size)


def attention_compose(P1, params):
    """Organ-attention map ``Q = W * P1 + b`` (single channel).

    ``*`` is a centred, zero-padded 2-D convolution summed over channels,
    in the cross-correlation convention used by CNN layers.
    """
    P1 = np.asarray(P1, dtype=np.float64)
    if P1.ndim != 3:
        raise ShapeError(f"probability map must be (H, W, C), got {P1.shape}")
    if params.kernel.shape[0] != P1.shape[2]:
        raise ShapeError(
            f"kernel has {params.kernel.shape[0]} input channels, map has {P1.shape[2]}"
        )
    Q = np.full(P1.shape[:2], float(params.bias))
    for c in range(P1.shape[2]):
        Q += ndimage.correlate(P1[:, :, c], params.kernel[c], mode="constant", cval=0.0)
    return Q


def apply_attention(image, Q):
    """Element-wise product of an image with its attention map."""
    image = np.asarray(image, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if image.shape != Q.shape:
        raise ShapeError(f"image {image.shape} and attention map {Q.shape} differ in shape")
    return image * Q


def fuse_activations(Ar, Ab, hr, hb):
    """Per-channel weighted sum of side-output and backbone activations."""
    Ar = np.asarray(Ar, dtype=np.float64)
    Ab = np.asarray(Ab, dtype=np.float64)
    if Ar.shape != Ab.shape:
        raise ShapeError(f"activation maps differ in shape: {Ar.shape} vs {Ab.shape}")
    hr = np.broadcast_to(np.asarray(hr, dtype=np.float64), (Ar.shape[-1],)) if np.ndim(hr) == 0 else np.asarray(hr, dtype=np.float64)
    hb = np.broadcast_to(np.asarray(hb, dtype=np.float64), (Ar.shape[-1],)) if np.ndim(hb) == 0 else np.asarray(hb, dtype=np.float64)
    if hr.shape != (Ar.shape[-1],) or hb.shape != (Ar.shape[-1],):
        raise ShapeError(
            f"fusion weights must have {Ar.shape[-1]} entries, got {hr.shape} and {hb.shape}"
        )
    return hr * Ar + hb * Ab


def fuse_stage_probs(P1, P2, rho):
    """Take the stage-I row where its background probability exceeds ``rho``, else stage-II."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    P1 = np.asarray(P1)
    P2 = np.asarray(P2)
    if P1.shape != P2.shape:
        raise ShapeError(f"stage maps differ in shape: {P1.shape} vs {P2.shape}")
    keep_first = P1[..., :1] > rho
    return np.where(keep_first, P1, P2)


def label_from_probs(P):
    """Most probable label per pixel or voxel; ties go to the lowest label."""
    return np.argmax(np.asarray(P), axis=-1)


def stage1_loss(T, P_backbone, P_side, P_fused, weights):
    """Stage-I objective: backbone, weighted side-output and fused cross-entropies.

    ``P_side`` maps side-output index (4..7) to its probability map.
    """
    side = sum(weights.h_side.get(n, 0.0) * cross_entropy(P, T) for n, P in P_side.items())
    return (
        weights.h_b1 * cross_entropy(P_backbone, T)
        + weights.h_s1 * side
        + weights.h_f1 * cross_entropy(P_fused, T)
    )


def joint_loss(T, P1, P2, rho, weights):
    """``h1 * J1 + h2 * J2`` for the two stages."""
    P1 = np.asarray(P1)
    return weights.h1 * cross_entropy(P1, T) + weights.h2 * masked_cross_entropy(
        P2, T, P1[..., 0], rho
    )
