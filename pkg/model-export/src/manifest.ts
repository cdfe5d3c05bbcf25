/**
 * Model file writer/reader: JSON manifest plus little-endian int32 blob.
 *
 * The byte layout is the inference server's model-file contract; the blob
 * stores each tensor contiguously at the offset/length recorded in the
 * manifest, so export -> load -> re-export is byte-identical.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { basename, dirname, join } from "node:path";

import { ExportError, Layer, ToyModel } from "./model.js";

interface TensorRef {
  offset: number;
  length: number;
  shape: number[];
}

function tensorToBytes(t: { data: Int32Array; shape: number[] }): Buffer {
  const buf = Buffer.alloc(t.data.length * 4);
  for (let i = 0; i < t.data.length; i++) buf.writeInt32LE(t.data[i], i * 4);
  return buf;
}

function tensorFromBytes(blob: Buffer, ref: TensorRef): { data: Int32Array; shape: number[] } {
  const data = new Int32Array(ref.length / 4);
  for (let i = 0; i < data.length; i++) data[i] = blob.readInt32LE(ref.offset + i * 4);
  return { data, shape: ref.shape };
}

export function saveModel(model: ToyModel, jsonPath: string): void {
  const blobName = basename(jsonPath).replace(/\.json$/, ".bin");
  const chunks: Buffer[] = [];
  let offset = 0;
  const layersMeta = model.layers.map((layer) => {
    const meta: Record<string, unknown> = {
      kind: layer.kind,
      stride: layer.stride,
      padding: layer.padding,
      pool: layer.pool,
      in_shape: layer.inShape ?? null,
      weight_bits: layer.weightBits,
      act_bits: layer.actBits,
      activation: layer.activation,
      eta: layer.eta,
      clip: layer.clip,
      skip_source: layer.skipSource,
    };
    for (const name of ["weight", "bias"] as const) {
      const tensor = layer[name];
      if (tensor) {
        const raw = tensorToBytes(tensor);
        meta[name] = { offset, length: raw.length, shape: tensor.shape };
        chunks.push(raw);
        offset += raw.length;
      } else {
        meta[name] = null;
      }
    }
    return meta;
  });
  const manifest = {
    accumulator_bits: model.accumulatorBits,
    input_clip: model.inputClip,
    input_shape: model.inputShape,
    layers: layersMeta,
    num_classes: model.numClasses,
    version: model.version,
    weights_blob: blobName,
  };
  writeFileSync(jsonPath, stableJson(manifest) + "\n");
  writeFileSync(join(dirname(jsonPath), blobName), Buffer.concat(chunks));
}

export function loadModel(jsonPath: string): ToyModel {
  const manifest = JSON.parse(readFileSync(jsonPath, "utf-8"));
  if (manifest.version === undefined) throw new ExportError("manifest missing version");
  const blob = readFileSync(join(dirname(jsonPath), manifest.weights_blob));
  const layers: Layer[] = manifest.layers.map((meta: Record<string, any>) => ({
    kind: meta.kind,
    weight: meta.weight ? tensorFromBytes(blob, meta.weight) : undefined,
    bias: meta.bias ? tensorFromBytes(blob, meta.bias) : undefined,
    stride: meta.stride,
    padding: meta.padding,
    pool: meta.pool,
    inShape: meta.in_shape ?? undefined,
    weightBits: meta.weight_bits,
    actBits: meta.act_bits,
    activation: meta.activation,
    eta: meta.eta,
    clip: meta.clip as [number, number],
    skipSource: meta.skip_source,
  }));
  return {
    version: manifest.version,
    accumulatorBits: manifest.accumulator_bits,
    inputShape: manifest.input_shape,
    inputClip: manifest.input_clip as [number, number],
    numClasses: manifest.num_classes,
    layers,
  };
}

/** JSON with sorted keys so re-exports are reproducible byte for byte. */
export function stableJson(value: unknown): string {
  return JSON.stringify(sortKeys(value), null, 1);
}

function sortKeys(value: unknown): unknown {
  if (Array.isArray(value)) return value.map(sortKeys);
  if (value && typeof value === "object") {
    return Object.fromEntries(
      Object.keys(value as object).sort()
        .map((k) => [k, sortKeys((value as Record<string, unknown>)[k])]),
    );
  }
  return value;
}
