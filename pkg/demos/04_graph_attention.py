"""Graph-interaction attention step by step on small tensors.

The semantic graph comes from query features against context-augmented key
features of the other person; the binary distance graph is added to the
alpha-scaled semantic graph and row-softmaxed; the fused weights aggregate
the other person's value features with a residual.
"""

import math

import numpy as np

import igformer.tensor as T
from igformer.attention import GiMsaParams, contexts, fuse_graphs, gi_msa, sdig
from igformer.graphs import InteractionGraphs, knn_threshold, pairwise_distance

rng = np.random.default_rng(1)
B, L, D, h = 2, 3, 8, 2
M, d = B * L, D // h

h_me = T.Tensor(rng.normal(size=(M, d)))
h_ne = T.Tensor(rng.normal(size=(M, d)))

# temporal context averages each part over time; spatial context averages
# each time step over parts
tc, sc = contexts(h_ne, B, L)
print(f"contexts: tc {tc.shape}, sc {sc.shape} (both broadcast back to M x d)")

wq = T.Tensor(rng.normal(size=(d, d)))
wk = T.Tensor(rng.normal(size=(d, d)))
logits = sdig(h_me, h_ne, wq, wk, B=B, L=L, scale=math.sqrt(d))
print(f"semantic graph logits: {logits.shape}, std {logits.data.std():.3f}")

# fuse with a sparse binary graph; rows become a probability distribution
positions = rng.normal(size=(M, 3))
dist = pairwise_distance(positions, rng.normal(size=(M, 3)))
dsig = knn_threshold(dist, k=2)
alpha = T.Tensor(1.0, requires_grad=True)
fused = fuse_graphs(dsig, logits, alpha)
print(f"fused rows sum to one: max deviation {np.abs(fused.data.sum(1) - 1).max():.2e}")

# full multi-head module with shared per-direction weights
wm = T.Tensor(np.eye(D))
graphs = InteractionGraphs(dist, dist.T.copy(), dsig, knn_threshold(dist.T.copy(), 2), 2)
params = GiMsaParams(
    wq=[T.Tensor(rng.normal(size=(d, d))) for _ in range(h)],
    wk=[T.Tensor(rng.normal(size=(d, d))) for _ in range(h)],
    wv=[T.Tensor(rng.normal(size=(d, d))) for _ in range(h)],
    alpha=[T.Tensor(1.0) for _ in range(h)],
    wm=wm, wn=wm)
x_a = T.Tensor(rng.normal(size=(M, D)))
x_b = T.Tensor(rng.normal(size=(M, D)))
out_a, out_b = gi_msa(x_a, x_b, graphs, params, B=B, L=L)
print(f"multi-head outputs: {out_a.shape} and {out_b.shape}")

# with tied output maps the module is exactly equivariant to swapping persons
sw_b, sw_a = gi_msa(x_b, x_a, graphs.swapped(), params, B=B, L=L)
print("person swap returns the swapped pair bit-identically:",
      np.array_equal(out_a.data, sw_a.data) and np.array_equal(out_b.data, sw_b.data))
