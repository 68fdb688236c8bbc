"""
Dispatching prompt tokens by hand
=================================

One prompted layer, two experts, four prompt tokens each.  We build the
dispatcher, look at its weights before and after nudging its output layer,
and fuse the experts' prompt tokens into integrated prompts.
"""

import numpy as np

from pmoe.dispatch import DispatchTrace, DispatcherLayer, dispatch_weights, fuse_tokens, record_trace
from pmoe.numerics import Rng

rng = Rng(0)
D, K, N_p, N_z = 8, 2, 4, 16

# every expert has its own prompt tokens, accumulated prompts from the
# previous block, and patch tokens
epts = rng.child(1).normal((K, N_p, D))
accum = rng.child(2).normal((K, N_p, D))
patches = rng.child(3).normal((K, N_z, D))

# a fresh dispatcher has a zero output layer, so every row is uniform
layer = DispatcherLayer.init(D, K, rng.child(4))
w0 = dispatch_weights(layer, epts[0], accum[0], patches[0])
print("initial weights for expert 0:\n", w0.data)

# give the output layer some random values and the weights become
# input-dependent
layer.mlp.fc2_w.data = rng.child(5).normal((D, K))
for k in range(K):
    w = dispatch_weights(layer, epts[k], accum[k], patches[k])
    print(f"expert {k} weights:\n", np.round(w.data, 3))

# integrated prompts are convex combinations of the matching prompt token
# of every expert
w = dispatch_weights(layer, epts[0], accum[0], patches[0])
ipt = fuse_tokens(w, epts)
inside = np.all(ipt.data >= epts.min(0) - 1e-12) & np.all(ipt.data <= epts.max(0) + 1e-12)
print("integrated prompts stay inside the experts' hull:", bool(inside))

# the first prompted layer has no accumulated prompts yet; that term is
# simply left out
print("first-layer weights:\n", np.round(dispatch_weights(layer, epts[0], None, patches[0]).data, 3))

# traces record which expert got the largest weight for each token
trace = DispatchTrace()
for k in range(K):
    record_trace(trace, dispatch_weights(layer, epts[k], accum[k], patches[k]), layer=0, expert=k)
print(trace.to_csv())
