/* The conversion pipeline: source state dict -> canonical archive.
 *
 * Deterministic: the same source, map and target produce byte-identical
 * archives. Every produced tensor's provenance (source name + transform) is
 * recorded; unconsumed source tensors are reported, and unresolved
 * canonical names are a hard error.
 */

import { Tensor, TensorMap, numel, writeArchive } from "./archive.js";
import { TargetConfig, canonicalShapes } from "./canonical.js";
import { MapRule, NameMap, expandRules } from "./namemap.js";
import {
  coerceRowsByDim,
  interpolateRows,
  reshapePatchProj,
  splitQkv,
  squeezeToRank,
  transpose2d,
} from "./transforms.js";

export interface ProvenanceEntry {
  target: string;
  source: string | null;
  transform: string | null;
  sourceShape: number[] | null;
  targetShape: number[];
}

export interface ConvertResult {
  archive: Buffer;
  provenance: ProvenanceEntry[];
  unconsumedSources: string[];
}

function shapesEqual(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

function applyRule(rule: MapRule, source: Tensor, targetShape: number[], cfg: TargetConfig): Tensor {
  let t = source;
  switch (rule.transform) {
    case undefined:
      break;
    case "transpose":
      t = transpose2d(squeezeToRank(t, 2));
      break;
    case "split-qkv": {
      const part = rule.arg;
      if (part !== "q" && part !== "k" && part !== "v") {
        throw new Error(`split-qkv rule for ${rule.target} needs arg q|k|v`);
      }
      t = splitQkv(squeezeToRank(t, t.shape.filter((s) => s !== 1).length), part);
      break;
    }
    case "interpolate-positional":
      t = interpolateRows(coerceRowsByDim(t, cfg.d), targetShape[0]);
      break;
    case "reshape-patch-proj":
      t = reshapePatchProj(t);
      break;
  }
  if (t.shape.length > targetShape.length) {
    t = squeezeToRank(t, targetShape.length);
  }
  if (!shapesEqual(t.shape, targetShape)) {
    throw new Error(
      `${rule.target}: converted shape [${t.shape}] != expected [${targetShape}]` +
        (rule.source ? ` (source ${rule.source} [${source.shape}])` : ""),
    );
  }
  return t;
}

export function convert(source: TensorMap, map: NameMap, cfg: TargetConfig): ConvertResult {
  const expected = canonicalShapes(cfg);
  const rules = expandRules(map, cfg.n_blocks);
  const produced: TensorMap = new Map();
  const provenance: ProvenanceEntry[] = [];
  const consumed = new Set<string>();
  const errors: string[] = [];

  for (const rule of rules) {
    const targetShape = expected.get(rule.target);
    if (!targetShape) {
      errors.push(`rule targets unknown canonical name ${rule.target}`);
      continue;
    }
    if (produced.has(rule.target)) {
      errors.push(`canonical name ${rule.target} produced more than once`);
      continue;
    }
    let tensor: Tensor;
    if (rule.source === null) {
      tensor = { shape: [...targetShape], data: new Float32Array(numel(targetShape)) };
    } else {
      const src = source.get(rule.source);
      if (!src) {
        errors.push(`source tensor ${rule.source} (for ${rule.target}) not in checkpoint`);
        continue;
      }
      consumed.add(rule.source);
      try {
        tensor = applyRule(rule, src, targetShape, cfg);
      } catch (err) {
        errors.push(String(err instanceof Error ? err.message : err));
        continue;
      }
    }
    produced.set(rule.target, tensor);
    provenance.push({
      target: rule.target,
      source: rule.source,
      transform: rule.transform ?? (rule.fill ? `fill:${rule.fill}` : null),
      sourceShape: rule.source ? [...source.get(rule.source)!.shape] : null,
      targetShape: [...targetShape],
    });
  }

  const missing = [...expected.keys()].filter((name) => !produced.has(name)).sort();
  if (missing.length > 0) {
    errors.push(`unresolved canonical names: ${missing.join(", ")}`);
  }
  if (errors.length > 0) {
    throw new Error(`conversion failed:\n  ${errors.join("\n  ")}`);
  }
  const unconsumed = [...source.keys()].filter((name) => !consumed.has(name)).sort();
  provenance.sort((a, b) => (a.target < b.target ? -1 : a.target > b.target ? 1 : 0));
  return {
    archive: writeArchive(produced),
    provenance,
    unconsumedSources: unconsumed,
  };
}
