import { describe, expect, it } from "vitest";

import { Tensor, TensorMap, readArchive, writeArchive, numel } from "../src/archive.js";
import { canonicalShapes, loadTargetConfig } from "../src/canonical.js";
import { convert } from "../src/convert.js";
import { loadNameMap } from "../src/namemap.js";
import { writeSafetensors, readSafetensors } from "../src/safetensors.js";

const TINY = loadTargetConfig({
  d: 8, n_blocks: 2, n_heads: 2, n_labels: 3, patch_dim: 256, f_p_max: 2, t_p_max: 4,
});

function filled(shape: number[], seed: number): Tensor {
  const n = numel(shape);
  const data = new Float32Array(n);
  let state = seed;
  for (let i = 0; i < n; i++) {
    state = (state * 48271) % 2147483647;
    data[i] = Math.fround(state / 2147483647 - 0.5);
  }
  return { shape, data };
}

function canonicalSource(): TensorMap {
  const source: TensorMap = new Map();
  let seed = 1;
  for (const [name, shape] of canonicalShapes(TINY)) {
    source.set(name, filled(shape, seed++));
  }
  return source;
}

const identityMap = loadNameMap(new URL("../maps/identity.json", import.meta.url).pathname);

describe("convert with the identity map", () => {
  it("is lossless and deterministic", () => {
    const source = canonicalSource();
    const a = convert(source, identityMap, TINY);
    const b = convert(source, identityMap, TINY);
    expect(a.archive.equals(b.archive)).toBe(true);
    expect(a.unconsumedSources).toEqual([]);
    const back = readArchive(a.archive);
    for (const [name, t] of source) {
      expect([...back.get(name)!.data]).toEqual([...t.data]);
    }
  });

  it("round trips archive -> safetensors -> archive byte-identically", () => {
    const source = canonicalSource();
    const original = writeArchive(source);
    const reserialized = writeSafetensors(readArchive(original));
    const converted = convert(readSafetensors(reserialized).tensors, identityMap, TINY);
    expect(converted.archive.equals(original)).toBe(true);
  });

  it("reports every tensor's provenance", () => {
    const result = convert(canonicalSource(), identityMap, TINY);
    expect(result.provenance.length).toBe(canonicalShapes(TINY).size);
    const entry = result.provenance.find((p) => p.target === "blocks.1.attn.qkv.weight");
    expect(entry?.source).toBe("blocks.1.attn.qkv.weight");
  });
});

describe("convert error paths", () => {
  it("lists unresolved canonical names when the map misses the head", () => {
    const source = canonicalSource();
    const map = {
      rules: identityMap.rules.filter((r) => !r.target.startsWith("head.")),
    };
    expect(() => convert(source, map, TINY)).toThrow(/head\.weight/);
  });

  it("reports missing source tensors", () => {
    const source = canonicalSource();
    source.delete("cls");
    expect(() => convert(source, identityMap, TINY)).toThrow(/cls/);
  });

  it("rejects shape mismatches", () => {
    const source = canonicalSource();
    source.set("te", filled([TINY.t_p_max + 1, TINY.d + 1], 5));
    expect(() => convert(source, identityMap, TINY)).toThrow(/te/);
  });

  it("reports unconsumed source tensors", () => {
    const source = canonicalSource();
    source.set("leftover.tensor", filled([3], 9));
    const result = convert(source, identityMap, TINY);
    expect(result.unconsumedSources).toEqual(["leftover.tensor"]);
  });
});

describe("research-framework layout maps", () => {
  it("converts a torch-style state dict through the passt map", () => {
    const d = TINY.d;
    const source: TensorMap = new Map();
    source.set("patch_embed.proj.weight", filled([d, 1, 16, 16], 21));
    source.set("patch_embed.proj.bias", filled([d], 22));
    source.set("time_new_pos_embed", filled([1, d, 1, 7], 23)); // 7 -> t_p_max rows
    source.set("freq_new_pos_embed", filled([1, d, 2, 1], 24));
    source.set("cls_token", filled([1, 1, d], 25));
    source.set("dist_token", filled([1, 1, d], 26));
    for (let n = 0; n < TINY.n_blocks; n++) {
      source.set(`blocks.${n}.norm1.weight`, filled([d], 30 + n));
      source.set(`blocks.${n}.norm1.bias`, filled([d], 40 + n));
      source.set(`blocks.${n}.attn.qkv.weight`, filled([3 * d, d], 50 + n)); // torch [out, in]
      source.set(`blocks.${n}.attn.qkv.bias`, filled([3 * d], 60 + n));
      source.set(`blocks.${n}.attn.proj.weight`, filled([d, d], 70 + n));
      source.set(`blocks.${n}.attn.proj.bias`, filled([d], 80 + n));
      source.set(`blocks.${n}.norm2.weight`, filled([d], 90 + n));
      source.set(`blocks.${n}.norm2.bias`, filled([d], 100 + n));
      source.set(`blocks.${n}.mlp.fc1.weight`, filled([4 * d, d], 110 + n));
      source.set(`blocks.${n}.mlp.fc1.bias`, filled([4 * d], 120 + n));
      source.set(`blocks.${n}.mlp.fc2.weight`, filled([d, 4 * d], 130 + n));
      source.set(`blocks.${n}.mlp.fc2.bias`, filled([d], 140 + n));
    }
    source.set("norm.weight", filled([d], 150));
    source.set("norm.bias", filled([d], 151));
    source.set("head.1.weight", filled([77, d], 152)); // unconsumed by this map

    const map = loadNameMap(new URL("../maps/passt-s.json", import.meta.url).pathname);
    const result = convert(source, map, TINY);
    const archive = readArchive(result.archive);
    expect(archive.size).toBe(canonicalShapes(TINY).size);

    // transpose semantics: torch [out, in] -> archive [in, out]
    const src = source.get("blocks.0.attn.qkv.weight")!;
    const dst = archive.get("blocks.0.attn.qkv.weight")!;
    expect(dst.shape).toEqual([d, 3 * d]);
    expect(dst.data[1 * 3 * d + 2]).toBeCloseTo(src.data[2 * d + 1], 7);

    // positional interpolation: endpoints preserved from the coerced table
    const te = archive.get("te")!;
    const rawTime = source.get("time_new_pos_embed")!;
    expect(te.shape).toEqual([TINY.t_p_max, d]);
    // coerced layout [rows=7, d]: first row holds channel values at index r=0
    expect(te.data[0]).toBeCloseTo(rawTime.data[0], 6);

    // fresh head, zeros
    expect([...archive.get("head.bias")!.data]).toEqual([0, 0, 0]);
    expect(result.unconsumedSources).toContain("head.1.weight");
  });
});
