"""Encode a transportation context and fuse it into motion queries.

Shows that every fused row is the same vector and that replacing the input
queries changes nothing, then runs a finite-difference gradient check.
"""
import numpy as np

from trafficctx.context import FusionParams, encode_context, fuse, grad_check, squared_loss
from trafficctx.llm import parse_response

reply = """INTENTIONS: [Straight, Right-Turn]
AFFORDANCES: [Slow-Allow, Right-Allow]
SCENARIO: [Intersection]"""
enc = encode_context(parse_response(reply))
print("intention  ", enc.I)
print("affordance ", enc.A)
print("scenario   ", enc.S)

rng = np.random.default_rng(0)
params = FusionParams.init(D=256, K=6, seed=0)
Q0 = rng.normal(size=(6, 256))
out = fuse(enc, Q0, params)
print("\nmax row spread       ", np.max(np.abs(out - out[0])))
print("max change for new Q0", np.max(np.abs(out - fuse(enc, rng.normal(size=Q0.shape), params))))

small = FusionParams.init(D=4, K=2, seed=1)
err = grad_check(small, enc, rng.normal(size=(2, 4)), squared_loss(rng.normal(size=(2, 4))))
print("gradient check, worst relative error", err)
