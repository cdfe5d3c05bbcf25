"""Quantized model representation, cleartext oracle, encrypted linear rounds.

A model is a sequence of integer layers grouped into rounds: each round is
a maximal linear block ending in one activation (or the terminal logits).
The server evaluates one round per protocol exchange; within a round every
layer is lowered to one integer matrix acting on ciphertext rows.

All model arithmetic is plain integer arithmetic mod nothing: the
accumulator bound guarantees values stay within the signed b-bit range, so
working mod p = 2**b on ciphertext lanes is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .params import Q_MASK

LAYER_KINDS = ("conv2d", "fully_connected", "avg_pool", "residual_add", "flatten")


class ModelError(Exception):
    pass


@dataclass
class LayerSpec:
    kind: str
    weight: Optional[np.ndarray] = None   # conv: (kh, kw, cin, cout); fc: (out, in)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    pool: int = 2
    in_shape: Optional[tuple] = None      # (H, W, C) for spatial kinds
    weight_bits: int = 4
    act_bits: int = 2
    activation: Optional[str] = None      # 'relu' closes a round
    eta: int = 1                          # requant scale of the round this layer closes
    clip: tuple = (0, 3)
    skip_source: int = -1                 # residual_add: round whose output is re-fed

    def out_shape(self):
        if self.kind == "conv2d":
            h, w, _ = self.in_shape
            kh, kw, _, cout = self.weight.shape
            oh = (h + 2 * self.padding - kh) // self.stride + 1
            ow = (w + 2 * self.padding - kw) // self.stride + 1
            return (oh, ow, cout)
        if self.kind == "avg_pool":
            h, w, c = self.in_shape
            return (h // self.pool, w // self.pool, c)
        if self.kind == "fully_connected":
            return (self.weight.shape[0],)
        return self.in_shape


@dataclass
class RoundSpec:
    """One linear block: layer index range, activation, requantization."""

    layers: list
    input_len: int
    output_len: int
    activation: Optional[str]
    eta: int
    clip: tuple
    skip_source: int = -1
    skip_len: int = 0
    final: bool = False


@dataclass
class QuantModel:
    layers: list
    input_shape: tuple
    num_classes: int
    acc_bits: int
    input_clip: tuple = (0, 3)
    version: int = 1
    rounds: list = field(default_factory=list)

    def __post_init__(self):
        if not self.rounds:
            self.rounds = _build_rounds(self)
        validate_accumulator(self)


def _flat_len(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def _build_rounds(model: QuantModel) -> list:
    rounds = []
    cur = []
    for idx, layer in enumerate(model.layers):
        cur.append(idx)
        closing = layer.activation is not None or idx == len(model.layers) - 1
        if closing:
            first = model.layers[cur[0]]
            last = model.layers[cur[-1]]
            in_len = _flat_len(first.in_shape) if first.in_shape else first.weight.shape[1]
            out_len = _flat_len(last.out_shape())
            skip_source, skip_len = -1, 0
            for li in cur:
                if model.layers[li].kind == "residual_add":
                    skip_source = model.layers[li].skip_source
                    skip_len = _flat_len(model.layers[li].in_shape)
            rounds.append(RoundSpec(
                layers=cur, input_len=in_len + skip_len, output_len=out_len,
                activation=last.activation, eta=last.eta, clip=last.clip,
                skip_source=skip_source, skip_len=skip_len,
                final=idx == len(model.layers) - 1))
            cur = []
    if cur:
        raise ModelError("trailing layers without a closing activation")
    return rounds


# ---------------------------------------------------------------------------
# Direct integer layer evaluation (the golden oracle path)


def _conv2d(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    h, w, cin = layer.in_shape
    kh, kw, _, cout = layer.weight.shape
    pad, st = layer.padding, layer.stride
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin), dtype=np.int64)
    xp[pad:pad + h, pad:pad + w, :] = x.reshape(h, w, cin)
    oh = (h + 2 * pad - kh) // st + 1
    ow = (w + 2 * pad - kw) // st + 1
    out = np.zeros((oh, ow, cout), dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            patch = xp[oy * st:oy * st + kh, ox * st:ox * st + kw, :]
            out[oy, ox, :] = np.tensordot(patch, layer.weight, axes=([0, 1, 2], [0, 1, 2]))
    if layer.bias is not None:
        out += layer.bias.reshape(1, 1, -1)
    return out


def _avg_pool_sum(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    # summed pooling; the 1/k^2 scale is folded into the round's eta
    h, w, c = layer.in_shape
    k = layer.pool
    v = x.reshape(h // k, k, w // k, k, c)
    return v.sum(axis=(1, 3))


def run_layer(x_flat: np.ndarray, layer: LayerSpec, round_input: np.ndarray) -> np.ndarray:
    if layer.kind == "conv2d":
        return _conv2d(x_flat.reshape(layer.in_shape), layer).reshape(-1)
    if layer.kind == "avg_pool":
        return _avg_pool_sum(x_flat.reshape(layer.in_shape), layer).reshape(-1)
    if layer.kind == "flatten":
        return x_flat
    if layer.kind == "fully_connected":
        out = layer.weight.astype(np.int64) @ x_flat
        if layer.bias is not None:
            out = out + layer.bias
        return out
    if layer.kind == "residual_add":
        skip = round_input[-_flat_len(layer.in_shape):]
        return x_flat + skip
    raise ModelError(f"unknown layer kind {layer.kind!r}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def requantize(y: np.ndarray, eta, clip) -> np.ndarray:
    """clip(round(y / eta)) with halves rounded away from zero."""
    y = np.asarray(y)
    if float(eta) == int(eta):
        e = int(eta)
        q = np.sign(y) * ((2 * np.abs(y.astype(np.int64)) + e) // (2 * e))
    else:
        q = np.sign(y) * np.floor(np.abs(y) / float(eta) + 0.5)
    return np.clip(q.astype(np.int64), clip[0], clip[1])


def activation_apply(values: np.ndarray, spec: Optional[str]) -> np.ndarray:
    if spec is None:
        return values
    if spec == "relu":
        return relu(values)
    raise ModelError(f"unknown activation {spec!r}")


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _acc_limit(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def run_round_linear(model: QuantModel, round_idx: int, v_in: np.ndarray) -> np.ndarray:
    """Integer-exact linear block of one round, with overflow detection."""
    rnd = model.rounds[round_idx]
    limit = _acc_limit(model.acc_bits)
    cur = v_in[:rnd.input_len - rnd.skip_len] if rnd.skip_len else v_in
    cur = cur.astype(np.int64)
    for li in rnd.layers:
        cur = run_layer(cur, model.layers[li], v_in.astype(np.int64))
        if np.abs(cur).max(initial=0) > limit:
            raise ModelError(
                f"accumulator overflow in round {round_idx}: |value| > 2^{model.acc_bits - 1} - 1")
    return cur


def cleartext_forward(model: QuantModel, x: np.ndarray, return_trace: bool = False):
    """Golden oracle: full integer forward pass, returns the logits vector.

    Inputs must already be quantized to the first layer's activation range.
    """
    v = np.asarray(x, dtype=np.int64).reshape(-1)
    trace = []
    for r, rnd in enumerate(model.rounds):
        if rnd.skip_len:
            skip = trace[rnd.skip_source][1] if rnd.skip_source >= 0 else np.asarray(x).reshape(-1)
            v = np.concatenate([v, skip.astype(np.int64)])
        if len(v) != rnd.input_len:
            raise ModelError(f"round {r} expects {rnd.input_len} inputs, got {len(v)}")
        y = run_round_linear(model, r, v)
        if rnd.final:
            trace.append((y, y))
            return (y, trace) if return_trace else y
        act = activation_apply(y, rnd.activation)
        v = requantize(act, rnd.eta, rnd.clip)
        trace.append((y, v))
    raise ModelError("model has no rounds")


def validate_accumulator(model: QuantModel) -> None:
    """Worst-case L1 bound check: no valid input can overflow the accumulator."""
    limit = _acc_limit(model.acc_bits)
    for layer in model.layers:
        if layer.weight is not None:
            wmax = (1 << (layer.weight_bits - 1)) - 1
            if np.abs(layer.weight).max(initial=0) > wmax:
                raise ModelError(
                    f"{layer.kind} weight exceeds declared {layer.weight_bits}-bit width")
    for r, rnd in enumerate(model.rounds):
        in_max = _round_in_max(model, r)
        cur = in_max
        for li in rnd.layers:
            layer = model.layers[li]
            if layer.kind == "conv2d":
                cout = layer.weight.shape[3]
                l1 = int(np.abs(layer.weight).reshape(-1, cout).sum(axis=0).max())
                cur = l1 * cur + (int(np.abs(layer.bias).max()) if layer.bias is not None else 0)
            elif layer.kind == "fully_connected":
                l1 = int(np.abs(layer.weight).sum(axis=1).max(initial=0))
                cur = l1 * cur + (int(np.abs(layer.bias).max()) if layer.bias is not None else 0)
            elif layer.kind == "avg_pool":
                cur = cur * layer.pool * layer.pool
            elif layer.kind == "residual_add":
                cur = cur + _round_in_max(model, r, skip=layer.skip_source)
            if cur > limit:
                raise ModelError(
                    f"worst-case accumulator {cur} exceeds 2^{model.acc_bits - 1} - 1 in round {r}")


def _round_in_max(model: QuantModel, round_idx: int, skip: Optional[int] = None) -> int:
    if skip is not None:
        src = model.rounds[skip].clip if skip >= 0 else model.input_clip
        return max(abs(src[0]), abs(src[1]))
    if round_idx == 0:
        return max(abs(model.input_clip[0]), abs(model.input_clip[1]))
    prev = model.rounds[round_idx - 1]
    return max(abs(prev.clip[0]), abs(prev.clip[1]))


# ---------------------------------------------------------------------------
# Lowering a round to one integer matrix over ciphertext rows


def layer_matrix(layer: LayerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Index-level lowering of one layer to (W, bias) over flat vectors."""
    if layer.kind == "conv2d":
        h, w, cin = layer.in_shape
        kh, kw, _, cout = layer.weight.shape
        pad, st = layer.padding, layer.stride
        oh = (h + 2 * pad - kh) // st + 1
        ow = (w + 2 * pad - kw) // st + 1
        lw = np.zeros((oh * ow * cout, h * w * cin), dtype=np.int64)
        lb = np.zeros(oh * ow * cout, dtype=np.int64)
        for oy in range(oh):
            for ox in range(ow):
                for co in range(cout):
                    o = (oy * ow + ox) * cout + co
                    for ky in range(kh):
                        for kx in range(kw):
                            iy, ix = oy * st + ky - pad, ox * st + kx - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                for ci in range(cin):
                                    lw[o, (iy * w + ix) * cin + ci] = layer.weight[ky, kx, ci, co]
                    if layer.bias is not None:
                        lb[o] = layer.bias[co]
        return lw, lb
    if layer.kind == "avg_pool":
        h, w, c = layer.in_shape
        k = layer.pool
        lw = np.zeros(((h // k) * (w // k) * c, h * w * c), dtype=np.int64)
        for oy in range(h // k):
            for ox in range(w // k):
                for ci in range(c):
                    o = (oy * (w // k) + ox) * c + ci
                    for dy in range(k):
                        for dx in range(k):
                            lw[o, ((oy * k + dy) * w + ox * k + dx) * c + ci] = 1
        return lw, np.zeros(lw.shape[0], dtype=np.int64)
    if layer.kind == "fully_connected":
        lb = layer.bias.astype(np.int64) if layer.bias is not None \
            else np.zeros(layer.weight.shape[0], dtype=np.int64)
        return layer.weight.astype(np.int64), lb
    raise ModelError(f"layer kind {layer.kind!r} has no matrix form")


def round_matrix(model: QuantModel, round_idx: int) -> tuple[np.ndarray, np.ndarray]:
    """(W, bias) with round_output = W @ round_input + bias, exact integers."""
    rnd = model.rounds[round_idx]
    E = rnd.input_len
    main_len = E - rnd.skip_len
    mat = np.zeros((main_len, E), dtype=np.int64)
    mat[:, :main_len] = np.eye(main_len, dtype=np.int64)
    bias = np.zeros(main_len, dtype=np.int64)
    for li in rnd.layers:
        layer = model.layers[li]
        if layer.kind == "flatten":
            continue
        if layer.kind == "residual_add":
            skip_len = _flat_len(layer.in_shape)
            if mat.shape[0] != skip_len:
                raise ModelError("residual branches have mismatched shapes")
            mat[:, E - rnd.skip_len:] += np.eye(skip_len, dtype=np.int64)
            continue
        lw, lb = layer_matrix(layer)
        bias = lw @ bias + lb
        mat = lw @ mat
    return mat, bias


# ---------------------------------------------------------------------------
# Ciphertext-matrix evaluation


@dataclass
class CtMatrix:
    """E ciphertext rows, each 2M torus lanes (mask | body, zero-padded)."""

    data: np.ndarray  # (E, 2, N) uint64
    m_lanes: int      # M

    @property
    def row_count(self) -> int:
        return self.data.shape[0]

    @property
    def lanes(self) -> np.ndarray:
        e, _, n = self.data.shape
        out = np.zeros((e, 2 * self.m_lanes), dtype=np.uint64)
        out[:, :n] = self.data[:, 0, :]
        out[:, self.m_lanes:self.m_lanes + n] = self.data[:, 1, :]
        return out


_LIMB = 18
_LIMB_MASK = np.uint64((1 << _LIMB) - 1)


def int_matmul_mod_q(w: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Exact W @ rows over Z_q via three 18-bit limbs in float64 products.

    Exactness needs max|W| * n_in * 2^18 < 2^53, asserted here.  Sparse
    weight matrices (lowered convolutions) go through a CSR product.
    """
    e_out, e_in = w.shape
    flat = rows.reshape(rows.shape[0], -1)
    bound = float(np.abs(w).max(initial=0)) * e_in * (1 << _LIMB)
    if bound >= 2 ** 53:
        raise ModelError("weight magnitude too large for exact lane combination")
    density = np.count_nonzero(w) / max(1, w.size)
    if density < 0.125 and w.size > 65536:
        from scipy.sparse import csr_matrix
        wf = csr_matrix(w.astype(np.float64))
    else:
        wf = w.astype(np.float64)
    acc = np.zeros((e_out, flat.shape[1]), dtype=np.uint64)
    for k in range(3):
        limb = ((flat >> np.uint64(_LIMB * k)) & _LIMB_MASK).astype(np.float64)
        part = np.rint(wf @ limb).astype(np.int64).astype(np.uint64)
        acc += part << np.uint64(_LIMB * k)
    acc &= np.uint64(Q_MASK)
    return acc.reshape((e_out,) + rows.shape[1:])


def encrypted_linear(w: np.ndarray, bias: np.ndarray, ct_rows,
                     bias_unit_payload: np.ndarray) -> np.ndarray:
    """Apply one round's integer matrix to extracted ciphertext rows.

    ct_rows: CtMatrix or raw (E, 2, N) uint64 batch; every lane of a row is
    combined with the same integer weights, so by linearity the output rows
    encrypt the layer outputs.  bias_unit_payload is the body-lane payload
    of a noiseless encryption of the constant 1 in extracted form, so
    biases fold in as trivial-ciphertext rows.
    """
    if isinstance(ct_rows, CtMatrix):
        ct_rows = ct_rows.data
    if w.shape[1] != ct_rows.shape[0]:
        raise ModelError(f"round matrix expects {w.shape[1]} rows, got {ct_rows.shape[0]}")
    out = int_matmul_mod_q(w, ct_rows)
    if bias is not None and np.any(bias):
        bias_body = (bias.astype(np.int64).astype(np.uint64)[:, None]
                     * bias_unit_payload[None, :]) & np.uint64(Q_MASK)
        out[:, 1, :] = (out[:, 1, :] + bias_body) & np.uint64(Q_MASK)
    return out


# ---------------------------------------------------------------------------
# Model file format: JSON manifest + little-endian int32 weights blob


def save_model(model: QuantModel, json_path, blob_path=None) -> None:
    json_path = Path(json_path)
    blob_path = Path(blob_path) if blob_path else json_path.with_suffix(".bin")
    blob = bytearray()
    layers_meta = []
    for layer in model.layers:
        meta = {
            "kind": layer.kind,
            "stride": layer.stride,
            "padding": layer.padding,
            "pool": layer.pool,
            "in_shape": list(layer.in_shape) if layer.in_shape else None,
            "weight_bits": layer.weight_bits,
            "act_bits": layer.act_bits,
            "activation": layer.activation,
            "eta": layer.eta,
            "clip": list(layer.clip),
            "skip_source": layer.skip_source,
        }
        for name in ("weight", "bias"):
            arr = getattr(layer, name)
            if arr is not None:
                raw = np.ascontiguousarray(arr, dtype="<i4").tobytes()
                meta[name] = {"offset": len(blob), "length": len(raw),
                              "shape": list(arr.shape)}
                blob.extend(raw)
            else:
                meta[name] = None
        layers_meta.append(meta)
    manifest = {
        "version": model.version,
        "accumulator_bits": model.acc_bits,
        "input_shape": list(model.input_shape),
        "input_clip": list(model.input_clip),
        "num_classes": model.num_classes,
        "weights_blob": blob_path.name,
        "layers": layers_meta,
    }
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    blob_path.write_bytes(bytes(blob))


def load_model(json_path) -> QuantModel:
    json_path = Path(json_path)
    manifest = json.loads(json_path.read_text())
    if "version" not in manifest:
        raise ModelError("model manifest missing mandatory version field")
    blob = (json_path.parent / manifest["weights_blob"]).read_bytes()
    layers = []
    for meta in manifest["layers"]:
        if meta["kind"] not in LAYER_KINDS:
            raise ModelError(f"unknown layer kind {meta['kind']!r}")
        arrs = {}
        for name in ("weight", "bias"):
            ref = meta[name]
            if ref is None:
                arrs[name] = None
            else:
                raw = blob[ref["offset"]:ref["offset"] + ref["length"]]
                arrs[name] = np.frombuffer(raw, dtype="<i4").astype(np.int64) \
                    .reshape(ref["shape"])
        layers.append(LayerSpec(
            kind=meta["kind"], weight=arrs["weight"], bias=arrs["bias"],
            stride=meta["stride"], padding=meta["padding"], pool=meta["pool"],
            in_shape=tuple(meta["in_shape"]) if meta["in_shape"] else None,
            weight_bits=meta["weight_bits"], act_bits=meta["act_bits"],
            activation=meta["activation"], eta=meta["eta"],
            clip=tuple(meta["clip"]), skip_source=meta["skip_source"]))
    return QuantModel(layers=layers, input_shape=tuple(manifest["input_shape"]),
                      num_classes=manifest["num_classes"],
                      acc_bits=manifest["accumulator_bits"],
                      input_clip=tuple(manifest.get("input_clip", (0, 3))),
                      version=manifest["version"])


def with_acc_bits(model: QuantModel, bits: int) -> QuantModel:
    """Same model declared at a wider accumulator (p = 2**bits); revalidated."""
    return QuantModel(layers=model.layers, input_shape=model.input_shape,
                      num_classes=model.num_classes, acc_bits=bits,
                      input_clip=model.input_clip, version=model.version)


def builtin_toy_path() -> Path:
    return Path(__file__).parent / "data" / "toy_cnn.json"


def load_builtin_toy() -> QuantModel:
    return load_model(builtin_toy_path())
