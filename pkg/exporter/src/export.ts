/**
 * Hook-driven statistics export.
 *
 * For every linear layer whose name matches one of the requested substring
 * patterns, a capture hook records the layer input rows z and the exact
 * per-sample loss-gradient rows gy at the layer output during backward.
 * The running sums z z^T, gy gy^T and z gy^T (the per-sample weight
 * gradient of a linear map) are averaged over the sample count and written
 * as float32 payloads in one LDB1 bundle:
 *
 *   layer.<name>.G        mean weight gradient        (d1 x d2)
 *   layer.<name>.Zfisher  mean input second moment    (d1 x d1)
 *   layer.<name>.Yfisher  mean output-gradient moment (d2 x d2)
 *   meta: n_total, sample_count
 *
 * Sequence items (a matrix of token rows per sample) follow the configured
 * token handling: each token as one sample, or the token-mean as one sample.
 */

import { Bundle, BundleEntry, metaInt, writeBundle } from "./bundle.js";
import { Linear, Sequential, softmaxCrossEntropy } from "./model.js";
import { Matrix } from "./tensor.js";

export type TokenHandling = "per-token" | "mean";

export interface ExportSpec {
  /** Substring patterns; a linear layer is matched if any pattern occurs in its name. */
  layerPatterns: string[];
  sampleCount: number;
  nTotal: number;
  tokenHandling: TokenHandling;
  includeBiasCoordinate: boolean;
  outPath: string;
}

export function defaultSpec(partial: Partial<ExportSpec> & { nTotal: number; outPath: string }): ExportSpec {
  return {
    layerPatterns: partial.layerPatterns ?? [""],
    sampleCount: partial.sampleCount ?? 256,
    nTotal: partial.nTotal,
    tokenHandling: partial.tokenHandling ?? "per-token",
    includeBiasCoordinate: partial.includeBiasCoordinate ?? false,
    outPath: partial.outPath,
  };
}

/**
 * One loader item. Rows of a plain item are independent samples; a sequence
 * item's rows are the tokens of a single example and follow the configured
 * token handling.
 */
export interface BatchItem {
  input: Matrix;
  labels: number[];
  isSequence?: boolean;
}

class LayerAccumulator {
  readonly d1: number;
  readonly d2: number;
  readonly sumG: Matrix;
  readonly sumZ: Matrix;
  readonly sumY: Matrix;
  count = 0;

  constructor(d1: number, d2: number) {
    this.d1 = d1;
    this.d2 = d2;
    this.sumG = new Matrix(d1, d2);
    this.sumZ = new Matrix(d1, d1);
    this.sumY = new Matrix(d2, d2);
  }

  addRows(z: Matrix, gy: Matrix): void {
    if (z.cols !== this.d1 || gy.cols !== this.d2 || z.rows !== gy.rows) {
      throw new Error(
        `shape drift: got z ${z.rows}x${z.cols}, gy ${gy.rows}x${gy.cols}, ` +
          `expected widths ${this.d1}/${this.d2}`
      );
    }
    this.sumZ.addInPlace(z.transposeMatmul(z));
    this.sumY.addInPlace(gy.transposeMatmul(gy));
    this.sumG.addInPlace(z.transposeMatmul(gy));
    this.count += z.rows;
  }
}

function toF32(m: Matrix, scale: number): Float32Array {
  const out = new Float32Array(m.data.length);
  for (let i = 0; i < out.length; i++) out[i] = Math.fround(m.data[i] * scale);
  return out;
}

export function matchLayers(model: Sequential, patterns: string[]): Linear[] {
  const linears = model.linearLayers();
  const matched = linears.filter((l) => patterns.some((p) => l.name.includes(p)));
  if (matched.length === 0) {
    const names = linears.map((l) => l.name).join(", ") || "(no linear layers)";
    throw new Error(`no layers matched ${JSON.stringify(patterns)}; model has: ${names}`);
  }
  return matched;
}

/**
 * Run forward/backward over the loader until the sample budget is consumed
 * and write the statistics bundle. Hooks are removed again even on error.
 */
export function exportStats(
  model: Sequential,
  loader: Iterable<BatchItem>,
  spec: ExportSpec
): Bundle {
  if (spec.sampleCount < 1) throw new Error("sampleCount must be >= 1");
  const matched = matchLayers(model, spec.layerPatterns);
  const accs = new Map<string, LayerAccumulator>();
  const biasDim = spec.includeBiasCoordinate ? 1 : 0;
  for (const layer of matched) {
    accs.set(layer.name, new LayerAccumulator(layer.inFeatures + biasDim, layer.outFeatures));
  }

  const pending = new Map<string, { z: Matrix; gy: Matrix }>();
  for (const layer of matched) {
    layer.hook = (name, input, gradOutput) => {
      pending.set(name, { z: input, gy: gradOutput });
    };
  }

  let consumed = 0;
  try {
    for (const item of loader) {
      if (consumed >= spec.sampleCount) break;
      let input = item.input;
      let labels = item.labels;
      if (!item.isSequence && input.rows > spec.sampleCount - consumed) {
        const keep = spec.sampleCount - consumed;
        input = new Matrix(keep, input.cols, input.data.slice(0, keep * input.cols));
        labels = labels.slice(0, keep);
      }
      const logits = model.forward(input);
      const { grad } = softmaxCrossEntropy(logits, labels);
      pending.clear();
      model.backward(grad);
      for (const layer of matched) {
        const captured = pending.get(layer.name);
        if (!captured) throw new Error(`hook for ${layer.name} saw no backward pass`);
        let { z, gy } = captured;
        if (item.isSequence && spec.tokenHandling === "mean" && z.rows > 1) {
          z = z.meanOfRows();
          gy = gy.meanOfRows();
        }
        if (spec.includeBiasCoordinate) z = z.withOnesColumn();
        accs.get(layer.name)!.addRows(z, gy);
      }
      consumed = accs.get(matched[0].name)!.count;
    }
  } finally {
    for (const layer of matched) layer.hook = null;
  }
  if (consumed === 0) throw new Error("loader yielded no samples");

  const entries: BundleEntry[] = [];
  for (const layer of matched) {
    const acc = accs.get(layer.name)!;
    const inv = 1 / acc.count;
    entries.push({
      name: `layer.${layer.name}.G`, dtype: "f32",
      dims: [acc.d1, acc.d2], data: toF32(acc.sumG, inv),
    });
    entries.push({
      name: `layer.${layer.name}.Zfisher`, dtype: "f32",
      dims: [acc.d1, acc.d1], data: toF32(acc.sumZ, inv),
    });
    entries.push({
      name: `layer.${layer.name}.Yfisher`, dtype: "f32",
      dims: [acc.d2, acc.d2], data: toF32(acc.sumY, inv),
    });
  }
  const bundle: Bundle = {
    meta: new Map([
      ["n_total", metaInt(spec.nTotal)],
      ["sample_count", metaInt(consumed)],
    ]),
    entries,
  };
  writeBundle(bundle, spec.outPath);
  return bundle;
}
