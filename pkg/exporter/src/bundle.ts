/**
 * Writer and reader for the LDB1 tensor container.
 *
 * Layout (all integers little-endian):
 *   magic "LDB1" | version u32=1 | meta_count u32 | entry_count u32
 *   meta record:  name_len u16 | utf-8 name | kind u8 (0=i64, 1=f64) | 8-byte value
 *   entry record: name_len u16 | utf-8 name | dtype u8 (0=f32, 1=f64)
 *                 | ndim u8 | dims u64 each | raw payload
 *
 * Meta records are emitted in sorted key order so equal bundles serialize
 * to identical bytes regardless of insertion order.
 */

import * as fs from "node:fs";

export const MAGIC = "LDB1";
export const VERSION = 1;

export type MetaValue = { kind: "i64"; value: bigint } | { kind: "f64"; value: number };

export interface BundleEntry {
  name: string;
  dtype: "f32" | "f64";
  dims: number[];
  /** Row-major payload; length must equal the product of dims. */
  data: Float32Array | Float64Array;
}

export interface Bundle {
  meta: Map<string, MetaValue>;
  entries: BundleEntry[];
}

export function metaInt(value: number | bigint): MetaValue {
  return { kind: "i64", value: BigInt(value) };
}

export function metaFloat(value: number): MetaValue {
  return { kind: "f64", value };
}

function elementCount(dims: number[]): number {
  let n = 1;
  for (const d of dims) {
    if (d < 1 || !Number.isInteger(d)) throw new Error(`bad dim ${d}`);
    n *= d;
  }
  return n;
}

export function encodeBundle(bundle: Bundle): Buffer {
  const chunks: Buffer[] = [];
  const head = Buffer.alloc(16);
  head.write(MAGIC, 0, "ascii");
  head.writeUInt32LE(VERSION, 4);
  head.writeUInt32LE(bundle.meta.size, 8);
  head.writeUInt32LE(bundle.entries.length, 12);
  chunks.push(head);

  const keys = [...bundle.meta.keys()].sort();
  for (const key of keys) {
    const value = bundle.meta.get(key)!;
    const nameBytes = Buffer.from(key, "utf-8");
    const rec = Buffer.alloc(2 + nameBytes.length + 1 + 8);
    rec.writeUInt16LE(nameBytes.length, 0);
    nameBytes.copy(rec, 2);
    if (value.kind === "i64") {
      rec.writeUInt8(0, 2 + nameBytes.length);
      rec.writeBigInt64LE(value.value, 3 + nameBytes.length);
    } else {
      rec.writeUInt8(1, 2 + nameBytes.length);
      rec.writeDoubleLE(value.value, 3 + nameBytes.length);
    }
    chunks.push(rec);
  }

  const seen = new Set<string>();
  for (const entry of bundle.entries) {
    if (seen.has(entry.name)) throw new Error(`duplicate entry name ${entry.name}`);
    seen.add(entry.name);
    if (entry.dims.length > 4) throw new Error(`entry ${entry.name}: more than 4 dims`);
    if (elementCount(entry.dims) !== entry.data.length) {
      throw new Error(`entry ${entry.name}: dims ${entry.dims} do not match payload`);
    }
    const nameBytes = Buffer.from(entry.name, "utf-8");
    const header = Buffer.alloc(2 + nameBytes.length + 2 + 8 * entry.dims.length);
    header.writeUInt16LE(nameBytes.length, 0);
    nameBytes.copy(header, 2);
    header.writeUInt8(entry.dtype === "f32" ? 0 : 1, 2 + nameBytes.length);
    header.writeUInt8(entry.dims.length, 3 + nameBytes.length);
    for (let i = 0; i < entry.dims.length; i++) {
      header.writeBigUInt64LE(BigInt(entry.dims[i]), 4 + nameBytes.length + 8 * i);
    }
    chunks.push(header);
    // typed arrays are little-endian on every platform node supports
    chunks.push(Buffer.from(entry.data.buffer, entry.data.byteOffset, entry.data.byteLength));
  }
  return Buffer.concat(chunks);
}

export function writeBundle(bundle: Bundle, path: string): void {
  const payload = encodeBundle(bundle);
  const tmp = `${path}.tmp-${process.pid}`;
  fs.writeFileSync(tmp, payload);
  fs.renameSync(tmp, path);
}

class Cursor {
  pos = 0;
  constructor(readonly buf: Buffer) {}

  take(n: number, what: string): Buffer {
    if (this.pos + n > this.buf.length) {
      throw new Error(`truncated bundle while reading ${what} at offset ${this.pos}`);
    }
    const out = this.buf.subarray(this.pos, this.pos + n);
    this.pos += n;
    return out;
  }
}

export function decodeBundle(buf: Buffer): Bundle {
  const cur = new Cursor(buf);
  const head = cur.take(16, "header");
  if (head.toString("ascii", 0, 4) !== MAGIC) {
    throw new Error(`bad magic ${JSON.stringify(head.toString("ascii", 0, 4))}`);
  }
  const version = head.readUInt32LE(4);
  if (version !== VERSION) throw new Error(`unsupported version ${version}`);
  const metaCount = head.readUInt32LE(8);
  const entryCount = head.readUInt32LE(12);

  const meta = new Map<string, MetaValue>();
  for (let i = 0; i < metaCount; i++) {
    const nameLen = cur.take(2, "meta key length").readUInt16LE(0);
    const key = cur.take(nameLen, "meta key").toString("utf-8");
    const kind = cur.take(1, `meta ${key} kind`).readUInt8(0);
    const raw = cur.take(8, `meta ${key} value`);
    if (kind === 0) meta.set(key, { kind: "i64", value: raw.readBigInt64LE(0) });
    else if (kind === 1) meta.set(key, { kind: "f64", value: raw.readDoubleLE(0) });
    else throw new Error(`meta ${key}: unknown kind ${kind}`);
  }

  const entries: BundleEntry[] = [];
  for (let i = 0; i < entryCount; i++) {
    const nameLen = cur.take(2, "entry name length").readUInt16LE(0);
    const name = cur.take(nameLen, "entry name").toString("utf-8");
    const dtypeCode = cur.take(1, `entry ${name} dtype`).readUInt8(0);
    const ndim = cur.take(1, `entry ${name} ndim`).readUInt8(0);
    if (dtypeCode !== 0 && dtypeCode !== 1) {
      throw new Error(`entry ${name}: unknown dtype code ${dtypeCode}`);
    }
    if (ndim > 4) throw new Error(`entry ${name}: ndim ${ndim} exceeds 4`);
    const dims: number[] = [];
    for (let d = 0; d < ndim; d++) {
      dims.push(Number(cur.take(8, `entry ${name} dims`).readBigUInt64LE(0)));
    }
    const count = elementCount(dims);
    const itemSize = dtypeCode === 0 ? 4 : 8;
    const raw = cur.take(count * itemSize, `entry ${name} payload`);
    // pooled Buffers are not 8-byte aligned; copy into a fresh ArrayBuffer
    const aligned = new ArrayBuffer(raw.length);
    new Uint8Array(aligned).set(raw);
    const data = dtypeCode === 0 ? new Float32Array(aligned) : new Float64Array(aligned);
    entries.push({ name, dtype: dtypeCode === 0 ? "f32" : "f64", dims, data });
  }
  if (cur.pos !== buf.length) {
    throw new Error(`${buf.length - cur.pos} trailing bytes after last entry`);
  }
  return { meta, entries };
}

export function readBundle(path: string): Bundle {
  return decodeBundle(fs.readFileSync(path));
}

export function getEntry(bundle: Bundle, name: string): BundleEntry {
  const entry = bundle.entries.find((e) => e.name === name);
  if (!entry) {
    const names = bundle.entries.map((e) => e.name).join(", ") || "(none)";
    throw new Error(`missing entry ${name}; available: ${names}`);
  }
  return entry;
}
