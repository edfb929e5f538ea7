import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, describe, expect, it } from "vitest";

import {
  Bundle,
  decodeBundle,
  encodeBundle,
  getEntry,
  metaFloat,
  metaInt,
  readBundle,
  writeBundle,
} from "../src/bundle.js";

const tmpDir = fs.mkdtempSync(path.join(os.tmpdir(), "ldb-test-"));
afterAll(() => fs.rmSync(tmpDir, { recursive: true, force: true }));

function sampleBundle(): Bundle {
  return {
    meta: new Map([
      ["n_total", metaInt(1000)],
      ["sample_count", metaInt(4)],
      ["damping_scale", metaFloat(1e-4)],
    ]),
    entries: [
      {
        name: "layer.l0.G",
        dtype: "f32",
        dims: [2, 3],
        data: new Float32Array([1, 2, 3, 4, 5, 6]),
      },
      {
        name: "layer.l0.Zfisher",
        dtype: "f64",
        dims: [2, 2],
        data: new Float64Array([1, 0.5, 0.5, 2]),
      },
    ],
  };
}

describe("LDB1 container", () => {
  it("round-trips bit-exactly", () => {
    const file = path.join(tmpDir, "roundtrip.ldb");
    const bundle = sampleBundle();
    writeBundle(bundle, file);
    const back = readBundle(file);
    expect(back.meta.get("n_total")).toEqual({ kind: "i64", value: 1000n });
    expect(back.meta.get("damping_scale")).toEqual({ kind: "f64", value: 1e-4 });
    expect(back.entries.map((e) => e.name)).toEqual(["layer.l0.G", "layer.l0.Zfisher"]);
    expect([...back.entries[0].data]).toEqual([1, 2, 3, 4, 5, 6]);
    expect(back.entries[1].dtype).toBe("f64");
    expect(encodeBundle(back).equals(encodeBundle(bundle))).toBe(true);
  });

  it("serializes meta in sorted key order regardless of insertion order", () => {
    const a = sampleBundle();
    const b = sampleBundle();
    b.meta = new Map([...b.meta.entries()].reverse());
    expect(encodeBundle(a).equals(encodeBundle(b))).toBe(true);
  });

  it("has the documented frame layout", () => {
    const buf = encodeBundle({ meta: new Map([["n_total", metaInt(0)]]), entries: [] });
    // 16-byte header plus one meta record: u16 len + "n_total" + kind + value
    expect(buf.length).toBe(16 + 2 + 7 + 1 + 8);
    expect(buf.toString("ascii", 0, 4)).toBe("LDB1");
    expect(buf.readUInt32LE(4)).toBe(1);
    expect(buf.readUInt32LE(8)).toBe(1);
    expect(buf.readUInt32LE(12)).toBe(0);
  });

  it("rejects bad magic, truncation and trailing bytes", () => {
    const buf = encodeBundle(sampleBundle());
    const broken = Buffer.from(buf);
    broken.write("NOPE", 0, "ascii");
    expect(() => decodeBundle(broken)).toThrow(/bad magic/);
    expect(() => decodeBundle(buf.subarray(0, buf.length - 5))).toThrow(/truncated/);
    expect(() => decodeBundle(Buffer.concat([buf, Buffer.from([0])]))).toThrow(/trailing/);
  });

  it("rejects duplicate entry names", () => {
    const bundle = sampleBundle();
    bundle.entries.push({ ...bundle.entries[0] });
    expect(() => encodeBundle(bundle)).toThrow(/duplicate/);
  });

  it("lists available entries when one is missing", () => {
    expect(() => getEntry(sampleBundle(), "nope")).toThrow(/layer\.l0\.G/);
  });
});
