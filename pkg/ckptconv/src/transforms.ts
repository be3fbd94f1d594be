/* Tensor transforms applied by NameMap rules.
 *
 * Sources are research-framework layouts (torch Linear weights are
 * [out, in]; the archive wants [in, out]); transforms bridge the gap.
 */

import { Tensor, numel } from "./archive.js";

export type TransformName =
  | "transpose"
  | "split-qkv"
  | "interpolate-positional"
  | "reshape-patch-proj";

export function transpose2d(t: Tensor): Tensor {
  if (t.shape.length !== 2) {
    throw new Error(`transpose needs a 2-D tensor, got shape [${t.shape}]`);
  }
  const [rows, cols] = t.shape;
  const out = new Float32Array(t.data.length);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      out[c * rows + r] = t.data[r * cols + c];
    }
  }
  return { shape: [cols, rows], data: out };
}

/* Slice one third of a fused qkv tensor along axis 0 ([3d, ...] layout). */
export function splitQkv(t: Tensor, part: "q" | "k" | "v"): Tensor {
  const third = t.shape[0] / 3;
  if (!Number.isInteger(third)) {
    throw new Error(`split-qkv: leading dim ${t.shape[0]} not divisible by 3`);
  }
  const index = { q: 0, k: 1, v: 2 }[part];
  const innerShape = t.shape.slice(1);
  const inner = numel(innerShape);
  const out = t.data.slice(index * third * inner, (index + 1) * third * inner);
  return { shape: [third, ...innerShape], data: new Float32Array(out) };
}

/* Coerce a positional-table tensor to [rows, d]: squeeze size-1 axes and
 * transpose when the feature axis comes first (PaSST stores [1, d, F, 1] /
 * [1, d, 1, T]). Ambiguous square tables are taken as [rows, d] as-is. */
export function coerceRowsByDim(t: Tensor, d: number): Tensor {
  const squeezed = t.shape.filter((s) => s !== 1);
  if (squeezed.length !== 2) {
    throw new Error(`positional table with shape [${t.shape}] does not squeeze to 2-D`);
  }
  const flat: Tensor = { shape: squeezed, data: t.data };
  if (squeezed[1] === d) {
    return flat;
  }
  if (squeezed[0] === d) {
    return transpose2d(flat);
  }
  throw new Error(`positional table [${t.shape}] has no axis of width d=${d}`);
}

/* Linear row interpolation over the normalized coordinate, endpoint-exact;
 * same rule as the engine's own positional resizing (shared contract,
 * independently implemented). */
export function interpolateRows(t: Tensor, rows: number): Tensor {
  const [src, d] = t.shape;
  if (src < 2) {
    throw new Error(`interpolate-positional needs >= 2 source rows, got ${src}`);
  }
  if (rows === src) {
    return { shape: [src, d], data: new Float32Array(t.data) };
  }
  const out = new Float32Array(rows * d);
  for (let r = 0; r < rows; r++) {
    const pos = rows === 1 ? 0 : (r / (rows - 1)) * (src - 1);
    const i0 = Math.min(Math.floor(pos), src - 2);
    const frac = pos - i0;
    for (let c = 0; c < d; c++) {
      out[r * d + c] = t.data[i0 * d + c] * (1 - frac) + t.data[(i0 + 1) * d + c] * frac;
    }
  }
  return { shape: [rows, d], data: out };
}

/* Conv-style patch projector [d, c, kh, kw] -> [kh*kw, d]; multi-channel
 * kernels (image-pretrained) are averaged over channels first. */
export function reshapePatchProj(t: Tensor): Tensor {
  if (t.shape.length === 2) {
    return transpose2d(t); // already a linear [d, patch_dim]
  }
  if (t.shape.length !== 4) {
    throw new Error(`reshape-patch-proj expects rank 2 or 4, got [${t.shape}]`);
  }
  const [d, channels, kh, kw] = t.shape;
  const patch = kh * kw;
  const averaged = new Float32Array(d * patch);
  for (let o = 0; o < d; o++) {
    for (let p = 0; p < patch; p++) {
      let sum = 0;
      for (let c = 0; c < channels; c++) {
        sum += t.data[(o * channels + c) * patch + p];
      }
      averaged[o * patch + p] = sum / channels;
    }
  }
  return transpose2d({ shape: [d, patch], data: averaged });
}

/* Squeeze size-1 axes until the rank matches the target. */
export function squeezeToRank(t: Tensor, rank: number): Tensor {
  let shape = [...t.shape];
  while (shape.length > rank) {
    const idx = shape.indexOf(1);
    if (idx < 0) {
      throw new Error(`cannot squeeze shape [${t.shape}] to rank ${rank}`);
    }
    shape.splice(idx, 1);
  }
  return { shape, data: t.data };
}
