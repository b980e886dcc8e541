"""Organ-attention arithmetic on supplied maps: softmax, attention, losses, stage fusion."""
import numpy as np

from viewfusion.oan import (
    AttentionParams,
    apply_attention,
    attention_compose,
    cross_entropy,
    fuse_stage_probs,
    label_from_probs,
    masked_cross_entropy,
    softmax_map,
)

rng = np.random.default_rng(0)
H, W, C = 6, 6, 3
image = rng.normal(size=(H, W))
truth = rng.integers(0, C, size=(H, W))

P1 = softmax_map(rng.normal(size=(H, W, C)) + 3 * np.eye(C)[truth])
print("stage-I loss", round(cross_entropy(P1, truth), 4))

# attention from the foreground channels, then reweight the input image
kernel = np.zeros((C, 3, 3))
kernel[1:, 1, 1] = 1.0
Q = attention_compose(P1, AttentionParams(kernel, 0.0))
focused = apply_attention(image, Q)
print("attention range", Q.min().round(3), Q.max().round(3), "| focused image energy",
      round(float((focused ** 2).sum()), 3), "of", round(float((image ** 2).sum()), 3))

P2 = softmax_map(rng.normal(size=(H, W, C)) + 4 * np.eye(C)[truth])
for rho in (0.2, 0.5, 1.0):
    print(f"rho={rho}: stage-II loss {masked_cross_entropy(P2, truth, P1[..., 0], rho):.4f}")

fused = fuse_stage_probs(P1, P2, 0.5)
print("fused labels correct:", int((label_from_probs(fused) == truth).sum()), "of", truth.size)
