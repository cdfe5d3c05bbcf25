"""Encrypt a vector, extract per-coefficient ciphertexts, pack them back.

This is the server's round pipeline without the model: the round trip is
the identity on the packed values, and the key-switch counter reproduces
the published per-coefficient costs.
"""

import numpy as np

from sfhr import crypto
from sfhr.dual import dual_basis
from sfhr.params import preset_for_bits
from sfhr.protocol import required_ksk_indices
from sfhr.tracepack import (KsCounter, PowerBundle, client_powers,
                            expected_pack_switches, fast_pack, partial_extract,
                            slot_positions)

for gamma in (0, 1, 2):
    scheme = preset_for_bits(8, gamma)  # M = 3^7
    params = scheme.ring
    dual = dual_basis(params)
    rng = np.random.default_rng(1)
    sk = crypto.keygen(params, seed=2)
    ksk = crypto.keygen_ksk(sk, required_ksk_indices(scheme), scheme.gadget,
                            scheme.delta, rng, dual)
    engine = crypto.KeySwitchEngine(ksk)

    vals = rng.integers(0, params.p, scheme.pack_factor)
    chunk = np.zeros(params.N, dtype=np.int64)
    chunk[:len(vals)] = vals

    if gamma == 0:
        pairs = [(1, chunk)]
    else:
        pairs = client_powers(chunk, gamma, params)
    cts = {d: crypto.encrypt_rlwe_p(poly, sk, scheme.delta, rng, dual)
           for d, poly in pairs}
    bundle = PowerBundle(gamma=gamma, power_cts=cts)

    rows = partial_extract(bundle, dual, scheme.pack_factor, params)
    counter = KsCounter()
    packed = fast_pack(rows, scheme, engine, counter=counter)

    ct = crypto.RlweCiphertext(a=packed[0], b=packed[1])
    got = crypto.decrypt_rlwe(ct, sk)[slot_positions(scheme)]
    expect = expected_pack_switches(params.t, params.alpha, scheme.beta_eff, gamma)
    print(f"gamma={gamma}: round trip exact = {np.array_equal(got, vals)}, "
          f"uploads {len(cts)} ct/chunk, "
          f"key switches/coefficient = {counter.per_coefficient():.3f} "
          f"(expected {expect / scheme.pack_factor:.3f})")
