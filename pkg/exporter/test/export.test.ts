import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, describe, expect, it } from "vitest";

import { getEntry, readBundle } from "../src/bundle.js";
import { BatchItem, defaultSpec, exportStats, matchLayers } from "../src/export.js";
import { Linear, Relu, Sequential } from "../src/model.js";
import {
  buildDemoModel,
  buildReferenceModel,
  demoLoader,
  REFERENCE_SAMPLES,
  REFERENCE_WEIGHT,
  referenceLoader,
} from "../src/reference.js";
import { Matrix } from "../src/tensor.js";
import { verifyBundle } from "../src/verify.js";

const tmpDir = fs.mkdtempSync(path.join(os.tmpdir(), "export-test-"));
afterAll(() => fs.rmSync(tmpDir, { recursive: true, force: true }));

/**
 * Scalar-arithmetic oracle for the reference layer: softmax probabilities,
 * per-sample output gradients and the three moment averages, written with
 * plain loops so it shares nothing with the library's matrix code.
 */
function referenceOracle() {
  const d1 = 3;
  const d2 = 2;
  const g = Array.from({ length: d1 }, () => new Array(d2).fill(0));
  const zf = Array.from({ length: d1 }, () => new Array(d1).fill(0));
  const yf = Array.from({ length: d2 }, () => new Array(d2).fill(0));
  for (const { z, y } of REFERENCE_SAMPLES) {
    const logits = [0, 0];
    for (let j = 0; j < d2; j++) {
      for (let i = 0; i < d1; i++) logits[j] += z[i] * REFERENCE_WEIGHT[i][j];
    }
    const m = Math.max(logits[0], logits[1]);
    const e = [Math.exp(logits[0] - m), Math.exp(logits[1] - m)];
    const sum = e[0] + e[1];
    const gy = [e[0] / sum, e[1] / sum];
    gy[y] -= 1;
    for (let i = 0; i < d1; i++) {
      for (let j = 0; j < d2; j++) g[i][j] += z[i] * gy[j];
      for (let k = 0; k < d1; k++) zf[i][k] += z[i] * z[k];
    }
    for (let j = 0; j < d2; j++) {
      for (let k = 0; k < d2; k++) yf[j][k] += gy[j] * gy[k];
    }
  }
  const n = REFERENCE_SAMPLES.length;
  const scale = (m: number[][]) => m.map((row) => row.map((v) => v / n));
  return { g: scale(g), zf: scale(zf), yf: scale(yf) };
}

function maxAbsDiff(flat: ArrayLike<number>, expected: number[][]): number {
  const cols = expected[0].length;
  let worst = 0;
  for (let i = 0; i < expected.length; i++) {
    for (let j = 0; j < cols; j++) {
      worst = Math.max(worst, Math.abs(Number(flat[i * cols + j]) - expected[i][j]));
    }
  }
  return worst;
}

describe("exportStats on the reference model", () => {
  it("matches the hand oracle within float32 tolerance", () => {
    const out = path.join(tmpDir, "ref.ldb");
    const bundle = exportStats(
      buildReferenceModel(),
      referenceLoader(),
      defaultSpec({ sampleCount: 4, nTotal: 1000, outPath: out })
    );
    const oracle = referenceOracle();
    expect(maxAbsDiff(getEntry(bundle, "layer.ref.linear.G").data, oracle.g)).toBeLessThan(1e-5);
    expect(maxAbsDiff(getEntry(bundle, "layer.ref.linear.Zfisher").data, oracle.zf)).toBeLessThan(1e-5);
    expect(maxAbsDiff(getEntry(bundle, "layer.ref.linear.Yfisher").data, oracle.yf)).toBeLessThan(1e-5);
    expect(bundle.meta.get("sample_count")).toEqual({ kind: "i64", value: 4n });
    expect(bundle.meta.get("n_total")).toEqual({ kind: "i64", value: 1000n });
    // on-disk copy parses back to the same payloads
    const back = readBundle(out);
    expect([...getEntry(back, "layer.ref.linear.G").data]).toEqual([
      ...getEntry(bundle, "layer.ref.linear.G").data,
    ]);
  });

  it("passes verification", () => {
    const bundle = exportStats(
      buildReferenceModel(),
      referenceLoader(),
      defaultSpec({ sampleCount: 4, nTotal: 1000, outPath: path.join(tmpDir, "v.ldb") })
    );
    const report = verifyBundle(bundle);
    expect(report.issues).toEqual([]);
    expect(report.layers).toEqual(["ref.linear"]);
  });
});

describe("token handling", () => {
  const seqLoader = (): BatchItem[] => [
    { input: new Matrix(8, 3, Float64Array.from({ length: 24 }, (_, i) => Math.sin(i))), labels: Array(8).fill(0), isSequence: true },
    { input: new Matrix(8, 3, Float64Array.from({ length: 24 }, (_, i) => Math.cos(i))), labels: Array(8).fill(1), isSequence: true },
  ];

  it("counts every token as a sample in per-token mode", () => {
    const bundle = exportStats(
      buildReferenceModel(),
      seqLoader(),
      defaultSpec({ sampleCount: 64, nTotal: 50, outPath: path.join(tmpDir, "tok.ldb") })
    );
    expect(bundle.meta.get("sample_count")).toEqual({ kind: "i64", value: 16n });
  });

  it("collapses a sequence to its token mean in mean mode", () => {
    const bundle = exportStats(
      buildReferenceModel(),
      seqLoader(),
      defaultSpec({
        sampleCount: 64, nTotal: 50, tokenHandling: "mean",
        outPath: path.join(tmpDir, "mean.ldb"),
      })
    );
    expect(bundle.meta.get("sample_count")).toEqual({ kind: "i64", value: 2n });
  });
});

describe("layer matching and spec validation", () => {
  it("lists model layers when no pattern matches", () => {
    expect(() => matchLayers(buildDemoModel(), ["attention.q"])).toThrow(
      /encoder\.fc1.*head\.proj/s
    );
  });

  it("matches by substring across multiple layers", () => {
    const matched = matchLayers(buildDemoModel(), ["fc1", "proj"]);
    expect(matched.map((l) => l.name)).toEqual(["encoder.fc1", "head.proj"]);
  });

  it("truncates plain batches to the sample budget", () => {
    const items: BatchItem[] = [
      {
        input: new Matrix(10, 3, Float64Array.from({ length: 30 }, (_, i) => (i % 7) - 3)),
        labels: Array.from({ length: 10 }, (_, i) => i % 2),
      },
    ];
    const bundle = exportStats(
      buildReferenceModel(),
      items,
      defaultSpec({ sampleCount: 6, nTotal: 20, outPath: path.join(tmpDir, "trunc.ldb") })
    );
    expect(bundle.meta.get("sample_count")).toEqual({ kind: "i64", value: 6n });
  });

  it("removes hooks on exit even when the run fails", () => {
    const model = buildReferenceModel();
    const layer = model.linearLayers()[0];
    const bad: BatchItem[] = [{ input: new Matrix(1, 3), labels: [9] }]; // label out of range
    expect(() =>
      exportStats(model, bad, defaultSpec({ nTotal: 5, outPath: path.join(tmpDir, "x.ldb") }))
    ).toThrow(/label/);
    expect(layer.hook).toBeNull();
  });
});

describe("bias coordinate and demo network", () => {
  it("augments z with a constant column when requested", () => {
    const out = path.join(tmpDir, "bias.ldb");
    const bundle = exportStats(
      buildReferenceModel(),
      referenceLoader(),
      defaultSpec({ sampleCount: 4, nTotal: 10, includeBiasCoordinate: true, outPath: out })
    );
    const zf = getEntry(bundle, "layer.ref.linear.Zfisher");
    expect(zf.dims).toEqual([4, 4]);
    // the bias/bias corner is the mean of 1*1
    expect(zf.data[15]).toBeCloseTo(1.0, 6);
    const g = getEntry(bundle, "layer.ref.linear.G");
    expect(g.dims).toEqual([4, 2]);
    expect(verifyBundle(bundle).issues).toEqual([]);
  });

  it("exports both demo layers and verifies", () => {
    const bundle = exportStats(
      buildDemoModel(),
      demoLoader(32),
      defaultSpec({ sampleCount: 32, nTotal: 100, outPath: path.join(tmpDir, "demo.ldb") })
    );
    const report = verifyBundle(bundle);
    expect(report.layers.sort()).toEqual(["encoder.fc1", "head.proj"]);
    expect(report.issues).toEqual([]);
  });

  it("flags asymmetry injected into a moment matrix", () => {
    const bundle = exportStats(
      buildDemoModel(),
      demoLoader(16),
      defaultSpec({ sampleCount: 16, nTotal: 100, outPath: path.join(tmpDir, "bad.ldb") })
    );
    const yf = bundle.entries.find((e) => e.name === "layer.head.proj.Yfisher")!;
    yf.data[1] += 0.5; // break symmetry
    const report = verifyBundle(bundle);
    expect(report.issues.some((i) => i.check === "symmetry")).toBe(true);
  });

  it("flags missing n_total", () => {
    const bundle = exportStats(
      buildDemoModel(),
      demoLoader(8),
      defaultSpec({ sampleCount: 8, nTotal: 100, outPath: path.join(tmpDir, "m.ldb") })
    );
    bundle.meta.delete("n_total");
    const report = verifyBundle(bundle);
    expect(report.issues.some((i) => i.detail.includes("n_total"))).toBe(true);
  });
});
