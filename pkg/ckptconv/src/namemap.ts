/* NameMap: ordered rules mapping source tensor names to canonical names.
 *
 * File format (JSON):
 *   {
 *     "description": "...",
 *     "rules": [
 *       {"source": "cls_token", "target": "cls"},
 *       {"source": "blocks.{n}.attn.qkv.weight",
 *        "target": "blocks.{n}.attn.qkv.weight", "transform": "transpose"},
 *       {"source": null, "target": "head.weight", "fill": "zeros"}
 *     ]
 *   }
 *
 * `{n}` expands over block indices 0..n_blocks-1. A `fill` rule synthesizes
 * a tensor (fresh head / positional tables when the source has none); every
 * canonical name must be produced exactly once.
 */

import { readFileSync } from "node:fs";

import { TransformName } from "./transforms.js";

export interface MapRule {
  source: string | null;
  target: string;
  transform?: TransformName;
  arg?: string; // e.g. split-qkv part: q | k | v
  fill?: "zeros";
}

export interface NameMap {
  description?: string;
  rules: MapRule[];
}

const KNOWN_TRANSFORMS = new Set([
  "transpose",
  "split-qkv",
  "interpolate-positional",
  "reshape-patch-proj",
]);

export function parseNameMap(raw: string): NameMap {
  let parsed: unknown;
  try {
    parsed = JSON.parse(raw);
  } catch (err) {
    throw new Error(`name map is not valid JSON: ${err}`);
  }
  const map = parsed as NameMap;
  if (!Array.isArray(map.rules)) {
    throw new Error("name map needs a top-level 'rules' array");
  }
  for (const rule of map.rules) {
    if (typeof rule.target !== "string" || rule.target.length === 0) {
      throw new Error(`rule without a target: ${JSON.stringify(rule)}`);
    }
    if (rule.source === undefined) {
      throw new Error(`rule for ${rule.target} must set source (string or null)`);
    }
    if (rule.source === null && rule.fill !== "zeros") {
      throw new Error(`sourceless rule for ${rule.target} must set fill: "zeros"`);
    }
    if (rule.transform && !KNOWN_TRANSFORMS.has(rule.transform)) {
      throw new Error(`unknown transform ${rule.transform} for ${rule.target}`);
    }
  }
  return map;
}

export function loadNameMap(path: string): NameMap {
  return parseNameMap(readFileSync(path, "utf8"));
}

/* Expand `{n}` placeholders over the block count, preserving rule order. */
export function expandRules(map: NameMap, nBlocks: number): MapRule[] {
  const out: MapRule[] = [];
  for (const rule of map.rules) {
    if (rule.target.includes("{n}") || (rule.source ?? "").includes("{n}")) {
      for (let n = 0; n < nBlocks; n++) {
        out.push({
          ...rule,
          source: rule.source === null ? null : rule.source.replaceAll("{n}", String(n)),
          target: rule.target.replaceAll("{n}", String(n)),
        });
      }
    } else {
      out.push({ ...rule });
    }
  }
  return out;
}
