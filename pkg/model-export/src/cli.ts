/** Command line: export a toy model file plus golden vectors. */

import { mkdirSync } from "node:fs";
import { join } from "node:path";

import { exportModel, identityToyModel, randomToyModel } from "./export.js";

function arg(name: string, fallback?: string): string | undefined {
  const ix = process.argv.indexOf(`--${name}`);
  return ix >= 0 ? process.argv[ix + 1] : fallback;
}

const out = arg("out", "out")!;
const seed = Number(arg("seed", "1"));
const bits = Number(arg("bits", "8"));
const kind = arg("kind", "random");
const count = Number(arg("vectors", "10"));

mkdirSync(out, { recursive: true });
const model = kind === "identity" ? identityToyModel() : randomToyModel(seed, bits);
const jsonPath = join(out, `toy_${kind}_${seed}.json`);
exportModel(model, jsonPath, join(out, `toy_${kind}_${seed}.vectors.json`), count, seed);
console.log(`wrote ${jsonPath} (+ blob, + ${count} golden vectors)`);
