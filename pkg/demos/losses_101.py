"""
Contrastive and reconstruction losses, by hand
===============================================

A short tour of the four training objectives on tiny inputs whose values
have closed forms.
"""

import math

import torch

from gesture_embed.losses import clip_loss, ntxent, reconstruction_loss

torch.set_default_dtype(torch.float64)

# Two identical anchors and positives: every candidate in the 2b-1 = 3
# denominator terms is equally similar, so NT-Xent is log 3.
z = torch.ones(2, 4)
print("ntxent identical   ", float(ntxent(z, z, 0.1)), "vs log 3 =", math.log(3))

# Orthonormal rows. The positive sits at cosine 1, the two negatives at 0.
eye = torch.eye(2)
print("ntxent orthonormal ", float(ntxent(eye, eye, 0.1)), "vs", math.log(1 + 2 * math.exp(-10)))

# CLIP: with b identical rows on each side every logit ties -> log b
for b in (2, 3, 7):
    g, v = torch.ones(b, 3), torch.full((b, 3), 2.0)
    print(f"clip b={b}          ", float(clip_loss(g, v, 0.1)), "vs", math.log(b))
print("clip orthonormal   ", float(clip_loss(eye, eye, 0.1)), "vs", -math.log(math.exp(10) / (math.exp(10) + 1)))

# Reconstruction is a weighted keypoint error plus bone-length and motion
# consistency terms. A perfect prediction costs nothing.
truth = torch.randn(4, 27, 2)
weights = torch.ones(4, 27)
terms = reconstruction_loss(truth.clone(), truth, weights)
print("reconstruction exact", [float(t) for t in terms])

# Shift the whole skeleton: keypoints are off, bones and motion are not.
terms = reconstruction_loss(truth + torch.tensor([2.5, -1.0]), truth, weights)
print("translated: keypoint %.3f bone %.2e motion %.2e" % (terms.keypoint, terms.bone, terms.motion))

# Gradients flow through every term; the unit tests compare them against
# central finite differences in double precision.
pred = truth.clone().requires_grad_(True)
reconstruction_loss(pred + 0.1, truth, weights).total.backward()
print("gradient norm", float(pred.grad.norm()))
