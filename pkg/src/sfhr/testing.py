"""Measurement harnesses shared by the noise audit, benches and tests."""

from __future__ import annotations

import numpy as np

from . import model as model_mod
from .confidentiality import NoiseAudit, noise_audit
from .crypto import KeySwitchEngine, encrypt_rlwe_batch, keygen, keygen_ksk, \
    lift_message, rlwe_phase_batch
from .dual import dual_basis
from .params import SchemeParams
from .protocol import required_ksk_indices
from .tracepack import (KsCounter, PowerBundle, client_powers, fast_pack,
                        partial_extract, slot_positions)
from .crypto import RlweCiphertext


def packed_noise_audit(scheme: SchemeParams, n_coeffs: int = 100000, seed: int = 0,
                       delta_override: float | None = None,
                       counter: KsCounter | None = None) -> NoiseAudit:
    """Extract+pack random vectors and measure slot residuals vs the truth.

    Runs whole pack groups of known random values (no shuffling involved;
    the oracle is the value vector itself) and accumulates the phase
    residuals at the packed slot positions.
    """
    params = scheme.ring
    delta = delta_override if delta_override is not None else scheme.delta
    dual = dual_basis(params)
    rng = np.random.default_rng(seed)
    sk = keygen(params, key_dist=scheme.key_dist, seed=seed + 1)
    ksk = keygen_ksk(sk, required_ksk_indices(scheme), scheme.gadget, delta, rng, dual)
    engine = KeySwitchEngine(ksk, mode="fft")
    F = scheme.pack_factor
    pos = slot_positions(scheme)
    phases_all = []
    oracle_all = []
    done = 0
    while done < n_coeffs:
        vals = rng.integers(0, params.p, F)
        m = np.zeros(params.N, dtype=np.int64)
        m[:F] = vals
        if scheme.gamma == 0:
            pairs = [(1, m)]
        else:
            pairs = client_powers(m, scheme.gamma, params)
        payloads = np.stack([lift_message(poly, params) for _, poly in pairs])
        batch = encrypt_rlwe_batch(payloads, sk, delta, rng, dual)
        cts = {d: RlweCiphertext(a=batch[i, 0], b=batch[i, 1])
               for i, (d, _) in enumerate(pairs)}
        bundle = PowerBundle(gamma=scheme.gamma, power_cts=cts)
        rows = partial_extract(bundle, dual, F, params)
        packed = fast_pack(rows, scheme, engine, counter=counter)
        phase = rlwe_phase_batch(packed[None, :, :], sk)[0]
        phases_all.append(phase[pos])
        oracle_all.append(vals)
        done += F
    return noise_audit(np.concatenate(phases_all), np.concatenate(oracle_all),
                       params.p_bits)


def make_random_toy_model(b: int, seed: int, num_classes: int = 10) -> model_mod.QuantModel:
    """Random two-conv-plus-FC toy model sized for an 8-bit accumulator."""
    rng = np.random.default_rng(seed)
    k1 = rng.integers(-1, 2, (3, 3, 1, 2))
    b1 = rng.integers(-2, 3, 2)
    k2 = rng.integers(-1, 2, (3, 3, 2, 2))
    b2 = rng.integers(-2, 3, 2)
    fc = rng.integers(-1, 2, (num_classes, 8))
    bf = rng.integers(-2, 3, num_classes)
    layers = [
        model_mod.LayerSpec(kind="conv2d", weight=k1, bias=b1, stride=1, padding=1,
                            in_shape=(8, 8, 1), weight_bits=2, act_bits=2,
                            activation="relu", eta=4, clip=(0, 3)),
        model_mod.LayerSpec(kind="conv2d", weight=k2, bias=b2, stride=2, padding=1,
                            in_shape=(8, 8, 2), weight_bits=2, act_bits=2,
                            activation="relu", eta=4, clip=(0, 3)),
        model_mod.LayerSpec(kind="avg_pool", pool=2, in_shape=(4, 4, 2)),
        model_mod.LayerSpec(kind="flatten", in_shape=(2, 2, 2)),
        model_mod.LayerSpec(kind="fully_connected", weight=fc, bias=bf,
                            weight_bits=2, act_bits=2, eta=1, clip=(-128, 127)),
    ]
    return model_mod.QuantModel(layers=layers, input_shape=(8, 8, 1),
                                num_classes=num_classes, acc_bits=b,
                                input_clip=(0, 3))
