"""Tour of the cyclotomic ring layer: reduction, automorphisms, traces.

Everything here is exact integer arithmetic on torus numerators mod 2^53.
"""

import numpy as np

from sfhr import ring
from sfhr.params import Q, RingParams

params = RingParams(t=3, alpha=2, p_bits=8)  # M = 9, Phi_9 = X^6 + X^3 + 1
print(f"M = {params.M}, N = {params.N}")

# X^6 folds to -(X^3 + 1): the defining relation of Phi_9
raw = np.zeros(7, dtype=np.uint64)
raw[6] = 1
print("X^6 mod Phi_9 ->", [(i, int(v) - (Q if v > Q // 2 else 0))
                           for i, v in enumerate(ring.cyclotomic_reduce(raw, params)) if v])

# automorphisms permute values and compose multiplicatively
x = np.zeros(params.N, dtype=np.uint64)
x[1] = 1  # the element X
print("X under d=2 ->", [(i, int(v)) for i, v in
                         enumerate(ring.automorphism(x, 2, params)) if v])

# the trace projects onto the base field: Tr(1) = N, Tr(X) = 0
one = np.zeros(params.N, dtype=np.uint64)
one[0] = 1
print("Tr(1) =", int(ring.trace_direct(one, params)[0]))
print("Tr(X) =", [int(v) for v in ring.trace_direct(x, params)])

# the full tower of partial traces composes to the complete trace
params = RingParams(t=3, alpha=3, p_bits=8)  # M = 27
rng = np.random.default_rng(0)
p = rng.integers(0, Q, params.N, dtype=np.uint64)
full = ring.trace_direct(p, params)
towered = ring.partial_trace_direct(p, params.alpha, 0, params)
print("tower == direct trace:", np.array_equal(full, towered))

# pairing against the dual basis extracts single coefficients
from sfhr.dual import dual_basis
dual = dual_basis(params)
m = rng.integers(-50, 50, params.N).astype(object)
i = 7
prod = ring.sparse_int_mul(m, dual.terms(i), params)
tr = ring.trace_direct(prod, params)
print(f"Tr(m * dual_{i}) = M * m_{i}:", tr[0] == params.M * m[i])
