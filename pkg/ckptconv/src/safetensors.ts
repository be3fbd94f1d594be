/* Minimal safetensors reader/writer (F32 and F16 tensors only).
 *
 * Format: u64 LE header length, JSON header mapping tensor name to
 * {dtype, shape, data_offsets: [begin, end]} with offsets relative to the
 * end of the header, then the raw little-endian payload.
 */

import { Tensor, TensorMap, numel } from "./archive.js";

interface HeaderEntry {
  dtype: string;
  shape: number[];
  data_offsets: [number, number];
}

function f16ToF32(bits: number): number {
  const sign = (bits & 0x8000) ? -1 : 1;
  const exp = (bits >> 10) & 0x1f;
  const frac = bits & 0x3ff;
  if (exp === 0) {
    return sign * frac * Math.pow(2, -24);
  }
  if (exp === 31) {
    return frac ? NaN : sign * Infinity;
  }
  return sign * (1 + frac / 1024) * Math.pow(2, exp - 15);
}

export function readSafetensors(buf: Buffer): { tensors: TensorMap; metadata: Record<string, string> } {
  if (buf.length < 8) {
    throw new Error("not a safetensors file");
  }
  const headerLen = Number(buf.readBigUInt64LE(0));
  if (8 + headerLen > buf.length) {
    throw new Error("truncated safetensors header");
  }
  let header: Record<string, HeaderEntry | Record<string, string>>;
  try {
    header = JSON.parse(buf.toString("utf8", 8, 8 + headerLen));
  } catch (err) {
    throw new Error(`unreadable safetensors header: ${err}`);
  }
  const payloadStart = 8 + headerLen;
  const tensors: TensorMap = new Map();
  let metadata: Record<string, string> = {};
  for (const [name, entry] of Object.entries(header)) {
    if (name === "__metadata__") {
      metadata = entry as Record<string, string>;
      continue;
    }
    const { dtype, shape, data_offsets } = entry as HeaderEntry;
    const [begin, end] = data_offsets;
    const bytes = buf.subarray(payloadStart + begin, payloadStart + end);
    const n = numel(shape);
    const data = new Float32Array(n);
    if (dtype === "F32") {
      if (bytes.length !== n * 4) {
        throw new Error(`tensor ${name}: payload length mismatch`);
      }
      for (let i = 0; i < n; i++) {
        data[i] = bytes.readFloatLE(i * 4);
      }
    } else if (dtype === "F16") {
      if (bytes.length !== n * 2) {
        throw new Error(`tensor ${name}: payload length mismatch`);
      }
      for (let i = 0; i < n; i++) {
        data[i] = f16ToF32(bytes.readUInt16LE(i * 2));
      }
    } else {
      throw new Error(`tensor ${name}: dtype ${dtype} is not floating (only F32/F16 convert)`);
    }
    tensors.set(name, { shape, data });
  }
  return { tensors, metadata };
}

export function writeSafetensors(tensors: TensorMap, metadata?: Record<string, string>): Buffer {
  const names = [...tensors.keys()].sort();
  const header: Record<string, unknown> = {};
  if (metadata && Object.keys(metadata).length > 0) {
    header["__metadata__"] = metadata;
  }
  const payloadParts: Buffer[] = [];
  let off = 0;
  for (const name of names) {
    const { shape, data } = tensors.get(name)!;
    const bytes = Buffer.alloc(data.length * 4);
    for (let i = 0; i < data.length; i++) {
      bytes.writeFloatLE(data[i], i * 4);
    }
    header[name] = { dtype: "F32", shape, data_offsets: [off, off + bytes.length] };
    payloadParts.push(bytes);
    off += bytes.length;
  }
  const headerBytes = Buffer.from(JSON.stringify(header), "utf8");
  const lenBuf = Buffer.alloc(8);
  lenBuf.writeBigUInt64LE(BigInt(headerBytes.length));
  return Buffer.concat([lenBuf, headerBytes, ...payloadParts]);
}
