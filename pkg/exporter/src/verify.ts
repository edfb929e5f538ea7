/**
 * Structural checks over an exported statistics bundle: required metadata,
 * per-layer dimension consistency, symmetry and positive semidefiniteness
 * of both second moments (with float32-sized slack).
 */

import { Bundle, getEntry, readBundle } from "./bundle.js";

export interface VerifyIssue {
  layer: string;
  check: string;
  detail: string;
}

export interface VerifyReport {
  layers: string[];
  issues: VerifyIssue[];
  summaryLines: string[];
}

function symmetryDefect(data: ArrayLike<number>, d: number): number {
  let worst = 0;
  let scale = 0;
  for (let i = 0; i < d; i++) {
    for (let j = 0; j < i; j++) {
      worst = Math.max(worst, Math.abs(data[i * d + j] - data[j * d + i]));
      scale = Math.max(scale, Math.abs(data[i * d + j]));
    }
    scale = Math.max(scale, Math.abs(data[i * d + i]));
  }
  return worst / Math.max(scale, 1e-30);
}

/** Smallest eigenvalue of a symmetric matrix via cyclic Jacobi sweeps. */
export function minEigenvalueSymmetric(data: ArrayLike<number>, d: number): number {
  const a = Float64Array.from({ length: d * d }, (_, i) => Number(data[i]));
  // symmetrize first; f32 round-off breaks exact symmetry
  for (let i = 0; i < d; i++) {
    for (let j = 0; j < i; j++) {
      const m = 0.5 * (a[i * d + j] + a[j * d + i]);
      a[i * d + j] = m;
      a[j * d + i] = m;
    }
  }
  for (let sweep = 0; sweep < 30; sweep++) {
    let off = 0;
    for (let p = 0; p < d - 1; p++) {
      for (let q = p + 1; q < d; q++) off += a[p * d + q] * a[p * d + q];
    }
    if (off < 1e-24) break;
    for (let p = 0; p < d - 1; p++) {
      for (let q = p + 1; q < d; q++) {
        const apq = a[p * d + q];
        if (Math.abs(apq) < 1e-300) continue;
        const theta = (a[q * d + q] - a[p * d + p]) / (2 * apq);
        const t = Math.sign(theta || 1) / (Math.abs(theta) + Math.sqrt(theta * theta + 1));
        const c = 1 / Math.sqrt(t * t + 1);
        const s = t * c;
        for (let k = 0; k < d; k++) {
          const akp = a[k * d + p];
          const akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (let k = 0; k < d; k++) {
          const apk = a[p * d + k];
          const aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
      }
    }
  }
  let min = Infinity;
  for (let i = 0; i < d; i++) min = Math.min(min, a[i * d + i]);
  return min;
}

export function verifyBundle(bundle: Bundle): VerifyReport {
  const issues: VerifyIssue[] = [];
  const summaryLines: string[] = [];

  for (const key of ["n_total", "sample_count"]) {
    if (!bundle.meta.has(key)) {
      issues.push({ layer: "-", check: "meta", detail: `missing meta key ${key}` });
    }
  }

  const layers = [
    ...new Set(
      bundle.entries
        .filter((e) => e.name.startsWith("layer.") && e.name.endsWith(".G"))
        .map((e) => e.name.slice("layer.".length, -".G".length))
    ),
  ];
  if (layers.length === 0) {
    issues.push({ layer: "-", check: "entries", detail: "no layer.<id>.G entries found" });
  }

  for (const layer of layers) {
    let g, zf, yf;
    try {
      g = getEntry(bundle, `layer.${layer}.G`);
      zf = getEntry(bundle, `layer.${layer}.Zfisher`);
      yf = getEntry(bundle, `layer.${layer}.Yfisher`);
    } catch (err) {
      issues.push({ layer, check: "entries", detail: String(err) });
      continue;
    }
    const [d1, d2] = g.dims;
    if (g.dims.length !== 2) {
      issues.push({ layer, check: "dims", detail: `G has dims ${g.dims}` });
      continue;
    }
    if (zf.dims.length !== 2 || zf.dims[0] !== d1 || zf.dims[1] !== d1) {
      issues.push({ layer, check: "dims", detail: `Zfisher dims ${zf.dims}, expected ${d1}x${d1}` });
    }
    if (yf.dims.length !== 2 || yf.dims[0] !== d2 || yf.dims[1] !== d2) {
      issues.push({ layer, check: "dims", detail: `Yfisher dims ${yf.dims}, expected ${d2}x${d2}` });
    }
    for (const [label, entry, d] of [["Zfisher", zf, d1], ["Yfisher", yf, d2]] as const) {
      if (entry.dims.length !== 2 || entry.dims[0] !== d || entry.dims[1] !== d) continue;
      const sym = symmetryDefect(entry.data, d);
      if (sym > 1e-6) {
        issues.push({ layer, check: "symmetry", detail: `${label} relative defect ${sym.toExponential(2)}` });
      }
      let trace = 0;
      for (let i = 0; i < d; i++) trace += Number(entry.data[i * d + i]);
      const minEig = minEigenvalueSymmetric(entry.data, d);
      if (minEig < -1e-4 * Math.max(trace, 1e-30)) {
        issues.push({
          layer, check: "psd",
          detail: `${label} min eigenvalue ${minEig.toExponential(2)} vs trace ${trace.toExponential(2)}`,
        });
      }
      summaryLines.push(
        `layer ${layer} ${label}: dims ${d}x${d}, trace ${trace.toExponential(3)}, ` +
          `min eig ${minEig.toExponential(2)}, symmetry defect ${sym.toExponential(1)}`
      );
    }
  }
  return { layers, issues, summaryLines };
}

export function verifyBundleFile(path: string): VerifyReport {
  return verifyBundle(readBundle(path));
}
