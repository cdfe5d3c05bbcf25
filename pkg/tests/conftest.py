import numpy as np
import pytest

from sfhr.dual import dual_basis
from sfhr.model import load_builtin_toy, with_acc_bits
from sfhr.params import RingParams, preset_for_bits
from sfhr.protocol import Client, ServerEngine


@pytest.fixture(scope="session")
def small_params():
    """M = 27: big enough for a real tower, small enough to brute force."""
    return RingParams(t=3, alpha=3, p_bits=8)


@pytest.fixture(scope="session")
def small_dual(small_params):
    return dual_basis(small_params)


@pytest.fixture(scope="session")
def toy_model():
    return load_builtin_toy()


class StackFactory:
    """Caches one protocol stack (server+client+keys) per (b, gamma)."""

    def __init__(self, model):
        self.model = model
        self._cache = {}

    def get(self, b, gamma, shuffle=True, threads=1):
        key = (b, gamma, shuffle, threads)
        if key not in self._cache:
            scheme = preset_for_bits(b, gamma)
            server = ServerEngine(with_acc_bits(self.model, b), scheme,
                                  master_seed=bytes(range(32)),
                                  shuffle_enabled=shuffle, threads=threads)
            client = Client(scheme, seed=1000 + b * 10 + gamma)
            key_id = server.register_client(client.make_ksk())
            self._cache[key] = (server, client, key_id)
        return self._cache[key]


@pytest.fixture(scope="session")
def stacks(toy_model):
    return StackFactory(toy_model)


def int_poly_divmod(num, den):
    """Exact long division of integer polynomials; returns the remainder.

    Independent oracle for cyclotomic reduction (den must be monic).
    """
    num = list(map(int, num))
    den = list(map(int, den))
    while den and den[-1] == 0:
        den.pop()
    assert den[-1] == 1
    rem = num[:]
    d = len(den) - 1
    for k in range(len(rem) - 1, d - 1, -1):
        coef = rem[k]
        if coef:
            for j in range(d + 1):
                rem[k - d + j] -= coef * den[j]
    return rem[:d]


def phi_coeffs(params):
    out = [0] * (params.N + 1)
    for j in range(params.t):
        out[j * params.n1] = 1
    return out
