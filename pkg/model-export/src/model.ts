/**
 * Integer toy-CNN definition and an independent integer forward pass.
 *
 * Layer semantics mirror the inference server's model format contract:
 * conv2d/fully_connected with integer weights, summed average pooling
 * (the 1/k^2 scale lives in the round's requantization), ReLU, and
 * requantize = clip(round-half-away-from-zero(y / eta)).
 */

export type LayerKind = "conv2d" | "fully_connected" | "avg_pool" | "residual_add" | "flatten";

export interface Layer {
  kind: LayerKind;
  weight?: { data: Int32Array; shape: number[] };
  bias?: { data: Int32Array; shape: number[] };
  stride: number;
  padding: number;
  pool: number;
  inShape?: number[];
  weightBits: number;
  actBits: number;
  activation: "relu" | null;
  eta: number;
  clip: [number, number];
  skipSource: number;
}

export interface ToyModel {
  version: number;
  accumulatorBits: number;
  inputShape: number[];
  inputClip: [number, number];
  numClasses: number;
  layers: Layer[];
}

export class ExportError extends Error {}

export function flatLen(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

function conv2d(x: Int32Array, layer: Layer): Int32Array {
  const [h, w, cin] = layer.inShape!;
  const [kh, kw, , cout] = layer.weight!.shape;
  const { stride, padding } = layer;
  const oh = Math.floor((h + 2 * padding - kh) / stride) + 1;
  const ow = Math.floor((w + 2 * padding - kw) / stride) + 1;
  const out = new Int32Array(oh * ow * cout);
  const wd = layer.weight!.data;
  for (let oy = 0; oy < oh; oy++) {
    for (let ox = 0; ox < ow; ox++) {
      for (let co = 0; co < cout; co++) {
        let acc = layer.bias ? layer.bias.data[co] : 0;
        for (let ky = 0; ky < kh; ky++) {
          for (let kx = 0; kx < kw; kx++) {
            const iy = oy * stride + ky - padding;
            const ix = ox * stride + kx - padding;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            for (let ci = 0; ci < cin; ci++) {
              acc += x[(iy * w + ix) * cin + ci]
                * wd[((ky * kw + kx) * cin + ci) * cout + co];
            }
          }
        }
        out[(oy * ow + ox) * cout + co] = acc;
      }
    }
  }
  return out;
}

function sumPool(x: Int32Array, layer: Layer): Int32Array {
  const [h, w, c] = layer.inShape!;
  const k = layer.pool;
  const out = new Int32Array((h / k) * (w / k) * c);
  for (let oy = 0; oy < h / k; oy++) {
    for (let ox = 0; ox < w / k; ox++) {
      for (let ci = 0; ci < c; ci++) {
        let acc = 0;
        for (let dy = 0; dy < k; dy++) {
          for (let dx = 0; dx < k; dx++) {
            acc += x[((oy * k + dy) * w + ox * k + dx) * c + ci];
          }
        }
        out[(oy * (w / k) + ox) * c + ci] = acc;
      }
    }
  }
  return out;
}

function fullyConnected(x: Int32Array, layer: Layer): Int32Array {
  const [rows, cols] = layer.weight!.shape;
  const out = new Int32Array(rows);
  for (let r = 0; r < rows; r++) {
    let acc = layer.bias ? layer.bias.data[r] : 0;
    for (let c = 0; c < cols; c++) acc += layer.weight!.data[r * cols + c] * x[c];
    out[r] = acc;
  }
  return out;
}

export function requantize(y: Int32Array, eta: number, clip: [number, number]): Int32Array {
  const out = new Int32Array(y.length);
  for (let i = 0; i < y.length; i++) {
    const q = Math.sign(y[i]) * Math.floor((2 * Math.abs(y[i]) + eta) / (2 * eta));
    out[i] = Math.min(Math.max(q, clip[0]), clip[1]);
  }
  return out;
}

export function relu(y: Int32Array): Int32Array {
  return y.map((v) => (v > 0 ? v : 0));
}

/** Full integer forward pass; returns the logits of the final round. */
export function forward(model: ToyModel, input: Int32Array): Int32Array {
  const limit = 2 ** (model.accumulatorBits - 1) - 1;
  const roundEnds = model.layers.map(
    (l, i) => l.activation !== null || i === model.layers.length - 1,
  );
  let cur: Int32Array<ArrayBufferLike> = Int32Array.from(input);
  for (let li = 0; li < model.layers.length; li++) {
    const layer = model.layers[li];
    if (layer.kind === "conv2d") cur = conv2d(cur, layer);
    else if (layer.kind === "avg_pool") cur = sumPool(cur, layer);
    else if (layer.kind === "fully_connected") cur = fullyConnected(cur, layer);
    else if (layer.kind === "flatten") { /* shape-only */ }
    else throw new ExportError(`unsupported layer kind ${layer.kind}`);
    for (const x of cur) {
      if (Math.abs(x) > limit) throw new ExportError("accumulator overflow during forward pass");
    }
    if (roundEnds[li]) {
      if (li === model.layers.length - 1) return cur;
      cur = requantize(layer.activation === "relu" ? relu(cur) : cur, layer.eta, layer.clip);
    }
  }
  return cur;
}

/** Symmetric per-tensor quantization of float weights to a signed width. */
export function quantizeSymmetric(weights: Float64Array, bits: number): Int32Array {
  const top = 2 ** (bits - 1) - 1;
  let maxAbs = 0;
  for (const w of weights) maxAbs = Math.max(maxAbs, Math.abs(w));
  const scale = maxAbs > 0 ? maxAbs / top : 1;
  return Int32Array.from(weights, (w) => {
    const q = Math.sign(w) * Math.floor(Math.abs(w) / scale + 0.5);
    return Math.min(Math.max(q, -top), top);
  });
}

/** Worst-case L1 accumulator bound; throws if any round can overflow. */
export function checkAccumulator(model: ToyModel): void {
  const limit = 2 ** (model.accumulatorBits - 1) - 1;
  let inMax = Math.max(Math.abs(model.inputClip[0]), Math.abs(model.inputClip[1]));
  let cur = inMax;
  for (const layer of model.layers) {
    if (layer.weight) {
      const top = 2 ** (layer.weightBits - 1) - 1;
      for (const w of layer.weight.data) {
        if (Math.abs(w) > top) {
          throw new ExportError(`weight exceeds declared ${layer.weightBits}-bit width`);
        }
      }
    }
    if (layer.kind === "conv2d") {
      const [kh, kw, cin, cout] = layer.weight!.shape;
      let l1max = 0;
      for (let co = 0; co < cout; co++) {
        let l1 = 0;
        for (let t = 0; t < kh * kw * cin; t++) l1 += Math.abs(layer.weight!.data[t * cout + co]);
        l1max = Math.max(l1max, l1);
      }
      let biasMax = 0;
      if (layer.bias) for (const b of layer.bias.data) biasMax = Math.max(biasMax, Math.abs(b));
      cur = l1max * cur + biasMax;
    } else if (layer.kind === "fully_connected") {
      const [rows, cols] = layer.weight!.shape;
      let l1max = 0;
      for (let r = 0; r < rows; r++) {
        let l1 = 0;
        for (let c = 0; c < cols; c++) l1 += Math.abs(layer.weight!.data[r * cols + c]);
        l1max = Math.max(l1max, l1);
      }
      let biasMax = 0;
      if (layer.bias) for (const b of layer.bias.data) biasMax = Math.max(biasMax, Math.abs(b));
      cur = l1max * cur + biasMax;
    } else if (layer.kind === "avg_pool") {
      cur = cur * layer.pool * layer.pool;
    }
    if (cur > limit) {
      throw new ExportError(
        `worst-case accumulator ${cur} exceeds 2^${model.accumulatorBits - 1} - 1`,
      );
    }
    if (layer.activation !== null) {
      cur = Math.max(Math.abs(layer.clip[0]), Math.abs(layer.clip[1]));
    }
  }
}
