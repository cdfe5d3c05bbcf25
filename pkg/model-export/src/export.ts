/**
 * Toy model construction, quantization and export with golden vectors.
 */

import { writeFileSync } from "node:fs";

import { saveModel } from "./manifest.js";
import {
  checkAccumulator, ExportError, flatLen, forward, quantizeSymmetric, ToyModel,
} from "./model.js";

/** Deterministic xorshift so exports are reproducible across runs. */
export class Rng {
  private state: bigint;

  constructor(seed: number) {
    this.state = BigInt(seed) * 2862933555777941757n + 3037000493n;
  }

  next(): number {
    this.state ^= this.state << 13n;
    this.state ^= this.state >> 7n;
    this.state ^= this.state << 17n;
    this.state &= (1n << 64n) - 1n;
    return Number(this.state >> 11n) / 2 ** 53;
  }

  int(lo: number, hi: number): number {
    return lo + Math.floor(this.next() * (hi - lo + 1));
  }
}

/** Random two-conv-plus-FC toy sized for an 8-bit accumulator. */
export function randomToyModel(seed: number, accumulatorBits = 8): ToyModel {
  const rng = new Rng(seed);
  const floats = (n: number) => Float64Array.from({ length: n }, () => rng.next() * 2 - 1);
  const k1 = quantizeSymmetric(floats(3 * 3 * 1 * 2), 2);
  const k2 = quantizeSymmetric(floats(3 * 3 * 2 * 2), 2);
  const fc = quantizeSymmetric(floats(10 * 8), 2);
  const bias = (n: number) => Int32Array.from({ length: n }, () => rng.int(-2, 2));
  const model: ToyModel = {
    version: 1,
    accumulatorBits,
    inputShape: [8, 8, 1],
    inputClip: [0, 3],
    numClasses: 10,
    layers: [
      {
        kind: "conv2d", weight: { data: k1, shape: [3, 3, 1, 2] },
        bias: { data: bias(2), shape: [2] }, stride: 1, padding: 1, pool: 2,
        inShape: [8, 8, 1], weightBits: 2, actBits: 2, activation: "relu",
        eta: 4, clip: [0, 3], skipSource: -1,
      },
      {
        kind: "conv2d", weight: { data: k2, shape: [3, 3, 2, 2] },
        bias: { data: bias(2), shape: [2] }, stride: 2, padding: 1, pool: 2,
        inShape: [8, 8, 2], weightBits: 2, actBits: 2, activation: "relu",
        eta: 4, clip: [0, 3], skipSource: -1,
      },
      {
        kind: "avg_pool", stride: 1, padding: 0, pool: 2, inShape: [4, 4, 2],
        weightBits: 2, actBits: 2, activation: null, eta: 1,
        clip: [-128, 127], skipSource: -1,
      },
      {
        kind: "flatten", stride: 1, padding: 0, pool: 2, inShape: [2, 2, 2],
        weightBits: 2, actBits: 2, activation: null, eta: 1,
        clip: [-128, 127], skipSource: -1,
      },
      {
        kind: "fully_connected", weight: { data: fc, shape: [10, 8] },
        bias: { data: bias(10), shape: [10] }, stride: 1, padding: 0, pool: 2,
        weightBits: 2, actBits: 2, activation: null, eta: 1,
        clip: [-128, 127], skipSource: -1,
      },
    ],
  };
  return model;
}

export function identityToyModel(): ToyModel {
  return {
    version: 1,
    accumulatorBits: 8,
    inputShape: [4, 4, 1],
    inputClip: [0, 3],
    numClasses: 16,
    layers: [{
      kind: "conv2d",
      weight: { data: Int32Array.of(1), shape: [1, 1, 1, 1] },
      bias: { data: new Int32Array(1), shape: [1] },
      stride: 1, padding: 0, pool: 2, inShape: [4, 4, 1],
      weightBits: 2, actBits: 2, activation: null, eta: 1,
      clip: [-128, 127], skipSource: -1,
    }],
  };
}

export interface GoldenVector {
  input: number[];
  scores: number[];
}

export function makeVectors(model: ToyModel, count: number, seed: number): GoldenVector[] {
  const rng = new Rng(seed ^ 0x5f3759df);
  const vectors: GoldenVector[] = [];
  const n = flatLen(model.inputShape);
  for (let k = 0; k < count; k++) {
    const input = Int32Array.from({ length: n },
      () => rng.int(model.inputClip[0], model.inputClip[1]));
    vectors.push({ input: Array.from(input), scores: Array.from(forward(model, input)) });
  }
  return vectors;
}

/** Validate, write manifest+blob, and emit golden input/score pairs. */
export function exportModel(model: ToyModel, jsonPath: string,
                            vectorsPath?: string, nVectors = 10, seed = 0): void {
  checkAccumulator(model);
  saveModel(model, jsonPath);
  if (vectorsPath) {
    writeFileSync(vectorsPath, JSON.stringify(makeVectors(model, nVectors, seed)) + "\n");
  }
}
