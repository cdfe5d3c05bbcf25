import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import { exportModel, identityToyModel, makeVectors, randomToyModel } from "../src/export.js";
import { loadModel, saveModel } from "../src/manifest.js";
import { ExportError, checkAccumulator, forward, quantizeSymmetric } from "../src/model.js";

function tmp(): string {
  return mkdtempSync(join(tmpdir(), "model-export-"));
}

describe("quantization", () => {
  it("stays within the declared width and preserves signs", () => {
    const q = quantizeSymmetric(Float64Array.from([0.9, -0.9, 0.1, 0.0]), 2);
    expect(Math.max(...q.map(Math.abs))).toBeLessThanOrEqual(1);
    expect(q[0]).toBe(1);
    expect(q[1]).toBe(-1);
    expect(q[3]).toBe(0);
  });
});

describe("schema round trip", () => {
  it("re-export is byte-identical for manifest and blob", () => {
    const dir = tmp();
    const model = randomToyModel(3);
    saveModel(model, join(dir, "a.json"));
    const again = loadModel(join(dir, "a.json"));
    saveModel(again, join(dir, "b.json"));
    expect(readFileSync(join(dir, "b.bin"))).toEqual(readFileSync(join(dir, "a.bin")));
    const a = readFileSync(join(dir, "a.json"), "utf-8").replace(/a\.bin/g, "X.bin");
    const b = readFileSync(join(dir, "b.json"), "utf-8").replace(/b\.bin/g, "X.bin");
    expect(b).toEqual(a);
  });

  it("identity model round-trips and computes identity", () => {
    const dir = tmp();
    const model = identityToyModel();
    exportModel(model, join(dir, "id.json"));
    const again = loadModel(join(dir, "id.json"));
    const x = Int32Array.from({ length: 16 }, (_, i) => i % 4);
    expect(Array.from(forward(again, x))).toEqual(Array.from(x));
  });
});

describe("validation", () => {
  it("refuses weights beyond their declared width", () => {
    const model = identityToyModel();
    model.layers[0].weight!.data[0] = 9;
    model.layers[0].weightBits = 2;
    expect(() => checkAccumulator(model)).toThrow(ExportError);
  });

  it("refuses models whose worst case overflows the accumulator", () => {
    const model = identityToyModel();
    model.layers[0].weight!.data[0] = 1;
    model.layers[0].bias!.data[0] = 300;
    model.layers[0].weightBits = 12;
    expect(() => checkAccumulator(model)).toThrow(/accumulator/);
  });
});

describe("golden vectors", () => {
  it("are reproducible and self-consistent", () => {
    const model = randomToyModel(5);
    const v1 = makeVectors(model, 4, 5);
    const v2 = makeVectors(model, 4, 5);
    expect(v1).toEqual(v2);
    for (const vec of v1) {
      expect(vec.scores).toEqual(Array.from(forward(model, Int32Array.from(vec.input))));
    }
  });
});

describe("parity with the inference engine's oracle", () => {
  // The exporter consumes the primary only through its external
  // interfaces: the model file format and the infer --cleartext CLI.
  it("forward pass matches the engine exactly on 10 inputs x 3 models", () => {
    const dir = tmp();
    for (const seed of [11, 22, 33]) {
      const model = randomToyModel(seed);
      const jsonPath = join(dir, `m${seed}.json`);
      exportModel(model, jsonPath, join(dir, `m${seed}.vectors.json`), 10, seed);
      const vectors = JSON.parse(readFileSync(join(dir, `m${seed}.vectors.json`), "utf-8"));
      expect(vectors.length).toBe(10);
      for (const vec of vectors) {
        const inputPath = join(dir, "x.json");
        writeFileSync(inputPath, JSON.stringify(vec.input));
        const out = execFileSync("python3", [
          "-m", "sfhr.cli", "infer", "--cleartext",
          "--model", jsonPath, "--input", inputPath,
        ], { encoding: "utf-8", cwd: join(__dirname, "..", "..") });
        const scores = JSON.parse(out).scores;
        expect(scores).toEqual(vec.scores);
      }
    }
  }, 120_000);
});
