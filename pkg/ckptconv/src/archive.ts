/* MAESTWTS named-tensor archive: the primary engine's weight format.
 *
 * Layout: 8-byte magic "MAESTWTS", u16 LE version (1), u32 LE tensor count,
 * then one manifest entry per tensor sorted by name (u16 name length, UTF-8
 * name, u8 rank, rank x u32 dims, u8 dtype tag (0 = f32), u64 payload byte
 * offset), then the concatenated little-endian float32 payload in manifest
 * order. Writing sorted by name makes serialization byte-deterministic.
 */

export interface Tensor {
  shape: number[];
  data: Float32Array;
}

export type TensorMap = Map<string, Tensor>;

const MAGIC = "MAESTWTS";
const VERSION = 1;
const DTYPE_F32 = 0;

export function numel(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function readArchive(buf: Buffer): TensorMap {
  if (buf.length < 14 || buf.toString("latin1", 0, 8) !== MAGIC) {
    throw new Error("not a MAESTWTS archive");
  }
  const version = buf.readUInt16LE(8);
  if (version !== VERSION) {
    throw new Error(`unsupported archive version ${version}`);
  }
  const count = buf.readUInt32LE(10);
  let off = 14;
  const entries: { name: string; shape: number[]; dataOff: number }[] = [];
  for (let i = 0; i < count; i++) {
    const nameLen = buf.readUInt16LE(off);
    off += 2;
    const name = buf.toString("utf8", off, off + nameLen);
    off += nameLen;
    const rank = buf.readUInt8(off);
    off += 1;
    const shape: number[] = [];
    for (let r = 0; r < rank; r++) {
      shape.push(buf.readUInt32LE(off));
      off += 4;
    }
    const dtype = buf.readUInt8(off);
    off += 1;
    if (dtype !== DTYPE_F32) {
      throw new Error(`tensor ${name}: unsupported dtype tag ${dtype}`);
    }
    const dataOff = Number(buf.readBigUInt64LE(off));
    off += 8;
    entries.push({ name, shape, dataOff });
  }
  const payloadStart = off;
  const tensors: TensorMap = new Map();
  for (const { name, shape, dataOff } of entries) {
    if (tensors.has(name)) {
      throw new Error(`duplicate tensor name ${name}`);
    }
    const n = numel(shape);
    const start = payloadStart + dataOff;
    const end = start + n * 4;
    if (end > buf.length) {
      throw new Error(`truncated payload for tensor ${name}`);
    }
    // copy into an aligned Float32Array (Buffer offsets may be unaligned)
    const bytes = buf.subarray(start, end);
    const data = new Float32Array(n);
    for (let i = 0; i < n; i++) {
      data[i] = bytes.readFloatLE(i * 4);
    }
    tensors.set(name, { shape, data });
  }
  return tensors;
}

export function writeArchive(tensors: TensorMap): Buffer {
  const names = [...tensors.keys()].sort();
  const manifestParts: Buffer[] = [];
  const payloadParts: Buffer[] = [];
  let payloadOff = 0n;
  for (const name of names) {
    const { shape, data } = tensors.get(name)!;
    if (numel(shape) !== data.length) {
      throw new Error(`tensor ${name}: shape ${shape} does not match ${data.length} values`);
    }
    for (const v of data) {
      if (!Number.isFinite(v)) {
        throw new Error(`tensor ${name}: non-finite value`);
      }
    }
    const nameBytes = Buffer.from(name, "utf8");
    const entry = Buffer.alloc(2 + nameBytes.length + 1 + 4 * shape.length + 1 + 8);
    let off = 0;
    entry.writeUInt16LE(nameBytes.length, off);
    off += 2;
    nameBytes.copy(entry, off);
    off += nameBytes.length;
    entry.writeUInt8(shape.length, off);
    off += 1;
    for (const dim of shape) {
      entry.writeUInt32LE(dim, off);
      off += 4;
    }
    entry.writeUInt8(DTYPE_F32, off);
    off += 1;
    entry.writeBigUInt64LE(payloadOff, off);
    manifestParts.push(entry);

    const payload = Buffer.alloc(data.length * 4);
    for (let i = 0; i < data.length; i++) {
      payload.writeFloatLE(data[i], i * 4);
    }
    payloadParts.push(payload);
    payloadOff += BigInt(payload.length);
  }
  const header = Buffer.alloc(14);
  header.write(MAGIC, 0, "latin1");
  header.writeUInt16LE(VERSION, 8);
  header.writeUInt32LE(names.length, 10);
  return Buffer.concat([header, ...manifestParts, ...payloadParts]);
}
