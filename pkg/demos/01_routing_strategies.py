#!/usr/bin/env python3
"""A walk through the three expert-selection rules on a single token.

A router turns a token's hidden vector into a probability distribution over
experts. Top-k takes a fixed number of the most probable experts; nucleus
(top-p) takes the smallest high-probability prefix whose cumulative mass
reaches a threshold, so confident tokens use fewer experts than ambiguous
ones. Either way, the kept probabilities are renormalized to sum to one.
"""

import numpy as np

from moelab import Graph, compute_probabilities, select_top_k, select_top_p

rng = np.random.default_rng(7)

print("=== one token, eight experts ===")
logits = rng.normal(size=(1, 8)) * 1.5
g = Graph()
probs = compute_probabilities(g, g.constant(logits), "none").values[0]
print("router probabilities:", np.round(probs, 3))

for k in (1, 2, 4):
    d = select_top_k(probs, k)
    print(f"top-{k}: experts {[int(i) for i in d.selected[0]]}, weights "
          f"{np.round(d.weights[0][d.weights[0] > 0], 3)}")

for p in (0.3, 0.6, 0.9):
    d = select_top_p(probs, p)
    print(f"top-p {p:.1f}: {d.counts[0]} experts {[int(i) for i in d.selected[0]]}, "
          f"cumulative mass {probs[d.selected[0]].sum():.3f}")

print()
print("=== the same distribution at different routing temperatures ===")
# standardizing the logits and scaling by a learnable temperature lets each
# layer sharpen or flatten its routing without moving the global threshold
for theta in (0.5, 1.0, 2.0, 4.0):
    g = Graph()
    p_t = compute_probabilities(
        g, g.constant(logits), "dynamic", theta=g.parameter(np.array(theta))
    ).values[0]
    d = select_top_p(p_t, 0.6)
    print(f"theta={theta:3.1f}: max prob {p_t.max():.3f}, "
          f"experts needed for 0.6 mass: {d.counts[0]}")

print()
print("A sharper distribution (larger theta) crosses the same threshold with")
print("fewer experts; a flatter one recruits more. That is the lever the")
print("per-layer learnable temperature gives each layer.")
