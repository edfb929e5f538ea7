/**
 * Minimal dense row-major matrix on Float64Array: just the operations the
 * statistics exporter needs (matmul, transpose-products, outer-product
 * accumulation). Rows are samples throughout.
 */

export class Matrix {
  readonly rows: number;
  readonly cols: number;
  readonly data: Float64Array;

  constructor(rows: number, cols: number, data?: Float64Array | number[]) {
    this.rows = rows;
    this.cols = cols;
    if (data === undefined) {
      this.data = new Float64Array(rows * cols);
    } else {
      if (data.length !== rows * cols) {
        throw new Error(`data length ${data.length} != ${rows}x${cols}`);
      }
      this.data = data instanceof Float64Array ? data : Float64Array.from(data);
    }
  }

  static fromRows(rows: number[][]): Matrix {
    const r = rows.length;
    const c = rows[0].length;
    const out = new Matrix(r, c);
    for (let i = 0; i < r; i++) {
      if (rows[i].length !== c) throw new Error("ragged rows");
      out.data.set(rows[i], i * c);
    }
    return out;
  }

  get(i: number, j: number): number {
    return this.data[i * this.cols + j];
  }

  set(i: number, j: number, v: number): void {
    this.data[i * this.cols + j] = v;
  }

  row(i: number): Float64Array {
    return this.data.subarray(i * this.cols, (i + 1) * this.cols);
  }

  copy(): Matrix {
    return new Matrix(this.rows, this.cols, new Float64Array(this.data));
  }

  /** this (r x k) times other (k x c). */
  matmul(other: Matrix): Matrix {
    if (this.cols !== other.rows) {
      throw new Error(`matmul shape mismatch: ${this.cols} vs ${other.rows}`);
    }
    const out = new Matrix(this.rows, other.cols);
    for (let i = 0; i < this.rows; i++) {
      for (let k = 0; k < this.cols; k++) {
        const a = this.data[i * this.cols + k];
        if (a === 0) continue;
        const src = k * other.cols;
        const dst = i * other.cols;
        for (let j = 0; j < other.cols; j++) {
          out.data[dst + j] += a * other.data[src + j];
        }
      }
    }
    return out;
  }

  /** this^T (c x r) times other (r x k): the sample-summed cross moment. */
  transposeMatmul(other: Matrix): Matrix {
    if (this.rows !== other.rows) {
      throw new Error(`transposeMatmul shape mismatch: ${this.rows} vs ${other.rows}`);
    }
    const out = new Matrix(this.cols, other.cols);
    for (let n = 0; n < this.rows; n++) {
      const a = n * this.cols;
      const b = n * other.cols;
      for (let i = 0; i < this.cols; i++) {
        const v = this.data[a + i];
        if (v === 0) continue;
        const dst = i * other.cols;
        for (let j = 0; j < other.cols; j++) {
          out.data[dst + j] += v * other.data[b + j];
        }
      }
    }
    return out;
  }

  /** this (r x k) times other^T (c x k). */
  matmulTranspose(other: Matrix): Matrix {
    if (this.cols !== other.cols) {
      throw new Error(`matmulTranspose shape mismatch: ${this.cols} vs ${other.cols}`);
    }
    const out = new Matrix(this.rows, other.rows);
    for (let i = 0; i < this.rows; i++) {
      for (let j = 0; j < other.rows; j++) {
        let s = 0;
        for (let k = 0; k < this.cols; k++) {
          s += this.data[i * this.cols + k] * other.data[j * other.cols + k];
        }
        out.data[i * other.rows + j] = s;
      }
    }
    return out;
  }

  addInPlace(other: Matrix): void {
    if (other.rows !== this.rows || other.cols !== this.cols) {
      throw new Error("addInPlace shape mismatch");
    }
    for (let i = 0; i < this.data.length; i++) this.data[i] += other.data[i];
  }

  scale(s: number): Matrix {
    const out = this.copy();
    for (let i = 0; i < out.data.length; i++) out.data[i] *= s;
    return out;
  }

  /** Column means collapsed into a single row (token averaging). */
  meanOfRows(): Matrix {
    const out = new Matrix(1, this.cols);
    for (let i = 0; i < this.rows; i++) {
      const base = i * this.cols;
      for (let j = 0; j < this.cols; j++) out.data[j] += this.data[base + j];
    }
    for (let j = 0; j < this.cols; j++) out.data[j] /= this.rows;
    return out;
  }

  /** Append a constant-1 column (bias coordinate). */
  withOnesColumn(): Matrix {
    const out = new Matrix(this.rows, this.cols + 1);
    for (let i = 0; i < this.rows; i++) {
      out.data.set(this.row(i), i * (this.cols + 1));
      out.data[i * (this.cols + 1) + this.cols] = 1;
    }
    return out;
  }
}

/** Row-wise softmax. */
export function softmaxRows(logits: Matrix): Matrix {
  const out = logits.copy();
  for (let i = 0; i < out.rows; i++) {
    const row = out.row(i);
    let max = -Infinity;
    for (const v of row) max = Math.max(max, v);
    let sum = 0;
    for (let j = 0; j < row.length; j++) {
      row[j] = Math.exp(row[j] - max);
      sum += row[j];
    }
    for (let j = 0; j < row.length; j++) row[j] /= sum;
  }
  return out;
}
