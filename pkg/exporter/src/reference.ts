/**
 * The shipped reference setup: one 3-by-2 linear layer with fixed weights
 * and four fixed labeled samples. Every value is a short literal so the
 * expected statistics can be recomputed by hand (or by an independent
 * implementation) and compared against exporter output.
 */

import { BatchItem } from "./export.js";
import { Linear, Relu, Sequential } from "./model.js";
import { Matrix } from "./tensor.js";

export const REFERENCE_WEIGHT = [
  [0.5, -0.25],
  [0.125, 0.75],
  [-0.5, 0.375],
];

export const REFERENCE_SAMPLES: { z: number[]; y: number }[] = [
  { z: [1.0, 0.0, 0.5], y: 0 },
  { z: [0.0, 1.0, -0.5], y: 1 },
  { z: [0.25, 0.25, 1.0], y: 0 },
  { z: [-0.5, 0.5, 0.25], y: 1 },
];

export function buildReferenceModel(): Sequential {
  return new Sequential([new Linear("ref.linear", Matrix.fromRows(REFERENCE_WEIGHT))]);
}

export function referenceLoader(): BatchItem[] {
  return REFERENCE_SAMPLES.map((s) => ({
    input: new Matrix(1, 3, s.z.slice()),
    labels: [s.y],
  }));
}

/** A two-layer toy network for pattern matching and demo runs. */
export function buildDemoModel(seed = 7): Sequential {
  const fc1 = Linear.randomInit("encoder.fc1", 6, 5, seed);
  const fc2 = Linear.randomInit("head.proj", 5, 3, seed + 1);
  return new Sequential([fc1, new Relu(), fc2]);
}

/** Deterministic synthetic samples for the demo network. */
export function demoLoader(count: number, seed = 11): BatchItem[] {
  let state = (seed >>> 0) || 1;
  const next = () => {
    state ^= state << 13; state >>>= 0;
    state ^= state >> 17;
    state ^= state << 5; state >>>= 0;
    return state / 0xffffffff;
  };
  const items: BatchItem[] = [];
  for (let i = 0; i < count; i++) {
    const z = Array.from({ length: 6 }, () => next() * 2 - 1);
    items.push({ input: new Matrix(1, 6, z), labels: [Math.floor(next() * 3)] });
  }
  return items;
}
