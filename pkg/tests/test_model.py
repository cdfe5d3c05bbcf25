import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfhr import model as mm
from sfhr.testing import make_random_toy_model


def naive_conv_oracle(x, weight, bias, stride, padding):
    """Independent direct convolution, written with its own index logic."""
    h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oh, ow, cout), dtype=np.int64)
    for co in range(cout):
        for oy in range(oh):
            for ox in range(ow):
                s = 0
                for ky in range(kh):
                    for kx in range(kw):
                        iy = oy * stride + ky - padding
                        ix = ox * stride + kx - padding
                        if iy < 0 or iy >= h or ix < 0 or ix >= w:
                            continue
                        for ci in range(cin):
                            s += int(x[iy, ix, ci]) * int(weight[ky, kx, ci, co])
                out[oy, ox, co] = s + (int(bias[co]) if bias is not None else 0)
    return out


def test_zero_input_zero_bias_gives_zero_preactivation(toy_model):
    x = np.zeros(toy_model.input_shape, dtype=np.int64)
    y = mm.run_round_linear(toy_model, 0, x.reshape(-1))
    layer = toy_model.layers[0]
    assert np.array_equal(y.reshape(8, 8, 2)[3, 3], layer.bias)


def test_identity_one_by_one_conv():
    w = np.ones((1, 1, 1, 1), dtype=np.int64)
    layer = mm.LayerSpec(kind="conv2d", weight=w, bias=np.zeros(1, dtype=np.int64),
                         in_shape=(4, 4, 1), weight_bits=2, act_bits=2,
                         activation=None, eta=1, clip=(-128, 127))
    model = mm.QuantModel(layers=[layer], input_shape=(4, 4, 1), num_classes=16,
                          acc_bits=8, input_clip=(0, 3))
    x = np.arange(16).reshape(4, 4, 1) % 4
    assert np.array_equal(mm.cleartext_forward(model, x), x.reshape(-1))


def test_forward_matches_naive_conv_oracle():
    rng = np.random.default_rng(41)
    for seed in range(3):
        model = make_random_toy_model(8, seed=seed)
        for _ in range(5):
            x = rng.integers(0, 4, model.input_shape)
            v = x.reshape(-1)
            for r, rnd in enumerate(model.rounds):
                y_fast = mm.run_round_linear(model, r, v)
                # oracle: direct conv/pool/fc with separate code
                cur = v.reshape(-1)
                for li in rnd.layers:
                    layer = model.layers[li]
                    if layer.kind == "conv2d":
                        cur = naive_conv_oracle(cur.reshape(layer.in_shape),
                                                layer.weight, layer.bias,
                                                layer.stride, layer.padding).reshape(-1)
                    elif layer.kind == "avg_pool":
                        h, w_, c = layer.in_shape
                        k = layer.pool
                        grid = cur.reshape(layer.in_shape)
                        out = np.zeros((h // k, w_ // k, c), dtype=np.int64)
                        for oy in range(h // k):
                            for ox in range(w_ // k):
                                out[oy, ox] = grid[oy * k:(oy + 1) * k,
                                                   ox * k:(ox + 1) * k].sum(axis=(0, 1))
                        cur = out.reshape(-1)
                    elif layer.kind == "fully_connected":
                        cur = layer.weight @ cur + layer.bias
                assert np.array_equal(y_fast, cur)
                if rnd.final:
                    break
                v = mm.requantize(mm.activation_apply(y_fast, rnd.activation),
                                  rnd.eta, rnd.clip)


def test_round_matrix_equals_direct_round(toy_model):
    rng = np.random.default_rng(42)
    for r in range(len(toy_model.rounds)):
        w, bias = mm.round_matrix(toy_model, r)
        for _ in range(5):
            v = rng.integers(0, 4, toy_model.rounds[r].input_len)
            assert np.array_equal(w @ v + bias, mm.run_round_linear(toy_model, r, v))


def test_requantize_examples():
    assert mm.requantize(np.array([0]), 4, (0, 15))[0] == 0
    assert mm.requantize(np.array([7]), 2, (0, 15))[0] == 4  # 3.5 away from zero
    assert mm.requantize(np.array([-7]), 2, (-15, 15))[0] == -4
    assert mm.relu(np.array([-5, 3])).tolist() == [0, 3]


@settings(max_examples=50, deadline=None)
@given(st.integers(-120, 120), st.integers(-120, 120), st.integers(1, 9))
def test_requantize_monotone_and_idempotent(a, bendpoint, eta):
    lo, hi = -15, 15
    qa = mm.requantize(np.array([a]), eta, (lo, hi))[0]
    qb = mm.requantize(np.array([bendpoint]), eta, (lo, hi))[0]
    if a <= bendpoint:
        assert qa <= qb
    inrange = mm.requantize(np.array([qa]), 1, (lo, hi))[0]
    assert inrange == qa


def test_softmax_normalized():
    p = mm.softmax(np.array([3, 1, -2, 7]))
    assert abs(p.sum() - 1.0) < 1e-12


def test_accumulator_overflow_detected():
    w = np.full((1, 1, 1, 1), 7, dtype=np.int64)
    layer = mm.LayerSpec(kind="conv2d", weight=w, bias=np.array([120]),
                         in_shape=(2, 2, 1), weight_bits=4, act_bits=4,
                         activation=None, eta=1, clip=(-128, 127))
    with pytest.raises(mm.ModelError):
        mm.QuantModel(layers=[layer], input_shape=(2, 2, 1), num_classes=4,
                      acc_bits=8, input_clip=(0, 15))


def test_weight_width_validated():
    w = np.full((2, 2), 9, dtype=np.int64)  # exceeds 4-bit signed range
    layer = mm.LayerSpec(kind="fully_connected", weight=w, bias=np.zeros(2, dtype=np.int64),
                         weight_bits=4, act_bits=2, eta=1, clip=(-128, 127))
    with pytest.raises(mm.ModelError):
        mm.QuantModel(layers=[layer], input_shape=(2,), num_classes=2,
                      acc_bits=12, input_clip=(0, 3))


def test_manifest_round_trip(tmp_path, toy_model):
    p1 = tmp_path / "m.json"
    mm.save_model(toy_model, p1)
    again = mm.load_model(p1)
    p2 = tmp_path / "m2.json"
    mm.save_model(again, p2)
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
    x = np.random.default_rng(0).integers(0, 4, toy_model.input_shape)
    assert np.array_equal(mm.cleartext_forward(toy_model, x),
                          mm.cleartext_forward(again, x))


def test_manifest_version_mandatory(tmp_path, toy_model):
    p1 = tmp_path / "m.json"
    mm.save_model(toy_model, p1)
    manifest = json.loads(p1.read_text())
    del manifest["version"]
    p1.write_text(json.dumps(manifest))
    with pytest.raises(mm.ModelError):
        mm.load_model(p1)


def test_encrypted_linear_shape_mismatch(toy_model):
    w, bias = mm.round_matrix(toy_model, 0)
    rows = np.zeros((w.shape[1] + 1, 2, 10), dtype=np.uint64)
    with pytest.raises(mm.ModelError):
        mm.encrypted_linear(w, bias, rows, np.zeros(10, dtype=np.uint64))


def test_int_matmul_exactness():
    rng = np.random.default_rng(43)
    w = rng.integers(-7, 8, (5, 9))
    rows = rng.integers(0, 1 << 53, (9, 2, 11), dtype=np.uint64)
    got = mm.int_matmul_mod_q(w, rows)
    want = np.zeros_like(got)
    for o in range(5):
        acc = np.zeros((2, 11), dtype=object)
        for i in range(9):
            acc = acc + int(w[o, i]) * rows[i].astype(object)
        want[o] = (acc % (1 << 53)).astype(np.uint64)
    assert np.array_equal(got, want)


def test_ct_matrix_lanes():
    data = np.arange(2 * 2 * 3, dtype=np.uint64).reshape(2, 2, 3)
    cm = mm.CtMatrix(data=data, m_lanes=5)
    lanes = cm.lanes
    assert lanes.shape == (2, 10)
    assert np.array_equal(lanes[0, :3], data[0, 0])
    assert not lanes[:, 3:5].any() and not lanes[:, 8:].any()
    assert cm.row_count == 2


def test_runtime_accumulator_overflow_raises(toy_model):
    # inputs beyond the declared clip can overflow: the oracle must hard-stop
    x = np.full(toy_model.input_shape, 120, dtype=np.int64)
    with pytest.raises(mm.ModelError):
        mm.cleartext_forward(toy_model, x)
