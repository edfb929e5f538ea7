/**
 * A tiny layer graph with enough backprop to drive statistics capture.
 *
 * Linear layers own an optional capture hook: during backward they hand the
 * hook the exact rows they saw on the way in (z) and the loss gradient rows
 * at their pre-activation output (gy). Hooks are installed and removed by
 * the exporter around each run, never left attached.
 */

import { Matrix, softmaxRows } from "./tensor.js";

export interface CaptureHook {
  (layerName: string, input: Matrix, gradOutput: Matrix): void;
}

export interface Layer {
  readonly name: string;
  forward(x: Matrix): Matrix;
  backward(gradOut: Matrix): Matrix;
}

export class Linear implements Layer {
  readonly name: string;
  readonly inFeatures: number;
  readonly outFeatures: number;
  weight: Matrix; // (in x out), row-major; forward is x @ W + b
  bias: Float64Array | null;
  hook: CaptureHook | null = null;
  private lastInput: Matrix | null = null;

  constructor(name: string, weight: Matrix, bias?: Float64Array | null) {
    this.name = name;
    this.inFeatures = weight.rows;
    this.outFeatures = weight.cols;
    this.weight = weight;
    this.bias = bias ?? null;
  }

  static randomInit(name: string, inFeatures: number, outFeatures: number, seed: number): Linear {
    const weight = new Matrix(inFeatures, outFeatures);
    let state = (seed >>> 0) || 1;
    for (let i = 0; i < weight.data.length; i++) {
      // xorshift32: deterministic regardless of platform
      state ^= state << 13; state >>>= 0;
      state ^= state >> 17;
      state ^= state << 5; state >>>= 0;
      weight.data[i] = ((state / 0xffffffff) * 2 - 1) / Math.sqrt(inFeatures);
    }
    return new Linear(name, weight);
  }

  forward(x: Matrix): Matrix {
    this.lastInput = x;
    const out = x.matmul(this.weight);
    if (this.bias) {
      for (let i = 0; i < out.rows; i++) {
        const row = out.row(i);
        for (let j = 0; j < row.length; j++) row[j] += this.bias[j];
      }
    }
    return out;
  }

  backward(gradOut: Matrix): Matrix {
    if (this.lastInput === null) throw new Error(`backward before forward in ${this.name}`);
    if (this.hook) this.hook(this.name, this.lastInput, gradOut);
    return gradOut.matmulTranspose(this.weight);
  }
}

export class Relu implements Layer {
  readonly name: string;
  private lastInput: Matrix | null = null;

  constructor(name = "relu") {
    this.name = name;
  }

  forward(x: Matrix): Matrix {
    this.lastInput = x;
    const out = x.copy();
    for (let i = 0; i < out.data.length; i++) out.data[i] = Math.max(out.data[i], 0);
    return out;
  }

  backward(gradOut: Matrix): Matrix {
    const inp = this.lastInput;
    if (inp === null) throw new Error("backward before forward in relu");
    const out = gradOut.copy();
    for (let i = 0; i < out.data.length; i++) {
      if (inp.data[i] <= 0) out.data[i] = 0;
    }
    return out;
  }
}

export class Sequential {
  readonly layers: Layer[];

  constructor(layers: Layer[]) {
    this.layers = layers;
  }

  forward(x: Matrix): Matrix {
    let h = x;
    for (const layer of this.layers) h = layer.forward(h);
    return h;
  }

  backward(gradOut: Matrix): void {
    let g = gradOut;
    for (let i = this.layers.length - 1; i >= 0; i--) g = this.layers[i].backward(g);
  }

  linearLayers(): Linear[] {
    return this.layers.filter((l): l is Linear => l instanceof Linear);
  }
}

/**
 * Per-sample softmax cross-entropy: returns the loss of each row and the
 * gradient rows d(loss_i)/d(logits_i) (no batch averaging, so captured
 * gradients are exact per-sample quantities).
 */
export function softmaxCrossEntropy(
  logits: Matrix, labels: number[]
): { losses: Float64Array; grad: Matrix } {
  if (labels.length !== logits.rows) throw new Error("one label per row required");
  const probs = softmaxRows(logits);
  const losses = new Float64Array(logits.rows);
  const grad = probs.copy();
  for (let i = 0; i < logits.rows; i++) {
    const y = labels[i];
    if (y < 0 || y >= logits.cols) throw new Error(`label ${y} out of range`);
    losses[i] = -Math.log(Math.max(probs.get(i, y), 1e-300));
    grad.set(i, y, grad.get(i, y) - 1);
  }
  return { losses, grad };
}
