import { describe, expect, it } from "vitest";

import { Tensor, TensorMap, readArchive, writeArchive } from "../src/archive.js";
import { readSafetensors, writeSafetensors } from "../src/safetensors.js";
import {
  coerceRowsByDim,
  interpolateRows,
  reshapePatchProj,
  splitQkv,
  transpose2d,
} from "../src/transforms.js";

function randomTensor(shape: number[], seed = 1): Tensor {
  const n = shape.reduce((a, b) => a * b, 1);
  const data = new Float32Array(n);
  let state = seed;
  for (let i = 0; i < n; i++) {
    state = (state * 1103515245 + 12345) & 0x7fffffff;
    data[i] = Math.fround((state / 0x7fffffff) * 2 - 1);
  }
  return { shape, data };
}

describe("archive round trip", () => {
  it("read(write(x)) is identical and write is deterministic", () => {
    const tensors: TensorMap = new Map([
      ["b.second", randomTensor([3, 4], 7)],
      ["a.first", randomTensor([5], 9)],
    ]);
    const buf = writeArchive(tensors);
    const back = readArchive(buf);
    expect([...back.keys()]).toEqual(["a.first", "b.second"]);
    for (const [name, t] of tensors) {
      expect(back.get(name)!.shape).toEqual(t.shape);
      expect([...back.get(name)!.data]).toEqual([...t.data]);
    }
    expect(writeArchive(back).equals(buf)).toBe(true);
  });

  it("rejects garbage and truncation", () => {
    expect(() => readArchive(Buffer.from("nope"))).toThrow(/archive/);
    const buf = writeArchive(new Map([["x", randomTensor([4], 3)]]));
    expect(() => readArchive(buf.subarray(0, buf.length - 4))).toThrow(/truncated/);
  });

  it("rejects non-finite values", () => {
    const bad: TensorMap = new Map([["x", { shape: [1], data: new Float32Array([NaN]) }]]);
    expect(() => writeArchive(bad)).toThrow(/non-finite/);
  });
});

describe("safetensors", () => {
  it("round trips f32 tensors", () => {
    const tensors: TensorMap = new Map([
      ["alpha", randomTensor([2, 3], 11)],
      ["beta", randomTensor([7], 13)],
    ]);
    const buf = writeSafetensors(tensors, { origin: "test" });
    const { tensors: back, metadata } = readSafetensors(buf);
    expect(metadata.origin).toBe("test");
    for (const [name, t] of tensors) {
      expect(back.get(name)!.shape).toEqual(t.shape);
      expect([...back.get(name)!.data]).toEqual([...t.data]);
    }
  });

  it("reads f16 payloads", () => {
    // hand-built header: one tensor [2] of f16 values 1.0 and -2.5
    const header = JSON.stringify({ h: { dtype: "F16", shape: [2], data_offsets: [0, 4] } });
    const headerBytes = Buffer.from(header, "utf8");
    const lenBuf = Buffer.alloc(8);
    lenBuf.writeBigUInt64LE(BigInt(headerBytes.length));
    const payload = Buffer.alloc(4);
    payload.writeUInt16LE(0x3c00, 0); // 1.0
    payload.writeUInt16LE(0xc100, 2); // -2.5
    const { tensors } = readSafetensors(Buffer.concat([lenBuf, headerBytes, payload]));
    expect([...tensors.get("h")!.data]).toEqual([1.0, -2.5]);
  });

  it("rejects non-floating dtypes", () => {
    const header = JSON.stringify({ h: { dtype: "I64", shape: [1], data_offsets: [0, 8] } });
    const headerBytes = Buffer.from(header, "utf8");
    const lenBuf = Buffer.alloc(8);
    lenBuf.writeBigUInt64LE(BigInt(headerBytes.length));
    const buf = Buffer.concat([lenBuf, headerBytes, Buffer.alloc(8)]);
    expect(() => readSafetensors(buf)).toThrow(/not floating/);
  });
});

describe("transforms", () => {
  it("transpose2d", () => {
    const t: Tensor = { shape: [2, 3], data: new Float32Array([1, 2, 3, 4, 5, 6]) };
    const out = transpose2d(t);
    expect(out.shape).toEqual([3, 2]);
    expect([...out.data]).toEqual([1, 4, 2, 5, 3, 6]);
  });

  it("splitQkv slices thirds along axis 0", () => {
    const t: Tensor = { shape: [6, 2], data: new Float32Array(Array.from({ length: 12 }, (_, i) => i)) };
    expect([...splitQkv(t, "q").data]).toEqual([0, 1, 2, 3]);
    expect([...splitQkv(t, "k").data]).toEqual([4, 5, 6, 7]);
    expect([...splitQkv(t, "v").data]).toEqual([8, 9, 10, 11]);
  });

  it("interpolateRows is endpoint-exact and identity on same size", () => {
    const t = randomTensor([30, 8], 17);
    const up = interpolateRows(t, 186);
    for (let c = 0; c < 8; c++) {
      expect(up.data[c]).toBeCloseTo(t.data[c], 6);
      expect(up.data[185 * 8 + c]).toBeCloseTo(t.data[29 * 8 + c], 6);
    }
    const same = interpolateRows(t, 30);
    expect([...same.data]).toEqual([...t.data]);
  });

  it("interpolateRows midpoint rule", () => {
    const t: Tensor = { shape: [2, 2], data: new Float32Array([1, 2, 3, 6]) };
    const out = interpolateRows(t, 3);
    expect([...out.data.slice(2, 4)]).toEqual([2, 4]);
  });

  it("coerceRowsByDim handles channel-first layouts", () => {
    const rows = 5;
    const d = 3;
    // [1, d, 1, rows] layout, feature axis first
    const data = new Float32Array(d * rows);
    for (let c = 0; c < d; c++) {
      for (let r = 0; r < rows; r++) {
        data[c * rows + r] = c * 100 + r;
      }
    }
    const out = coerceRowsByDim({ shape: [1, d, 1, rows], data }, d);
    expect(out.shape).toEqual([rows, d]);
    expect(out.data[0]).toBe(0);
    expect(out.data[1]).toBe(100);
    expect(out.data[d]).toBe(1);
  });

  it("reshapePatchProj averages channels and transposes", () => {
    // [d=1, c=2, 2, 2]: channels [1,2,3,4] and [3,4,5,6] -> mean [2,3,4,5]
    const t: Tensor = { shape: [1, 2, 2, 2], data: new Float32Array([1, 2, 3, 4, 3, 4, 5, 6]) };
    const out = reshapePatchProj(t);
    expect(out.shape).toEqual([4, 1]);
    expect([...out.data]).toEqual([2, 3, 4, 5]);
  });
});
