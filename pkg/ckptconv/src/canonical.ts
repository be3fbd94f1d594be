/* Canonical tensor names and shapes of the target archive.
 *
 * Independently implemented from the engine's loader against the documented
 * archive contract; the loader's validation is the arbiter.
 */

export interface TargetConfig {
  d: number;
  n_blocks: number;
  n_heads: number;
  mlp_ratio: number;
  n_labels: number;
  patch_dim: number; // flattened patch vector length (16*16)
  f_p_max: number;
  t_p_max: number;
}

export const DEFAULT_TARGET: TargetConfig = {
  d: 768,
  n_blocks: 12,
  n_heads: 12,
  mlp_ratio: 4,
  n_labels: 400,
  patch_dim: 256,
  f_p_max: 9,
  t_p_max: 186,
};

export function loadTargetConfig(raw: Partial<TargetConfig>): TargetConfig {
  const cfg = { ...DEFAULT_TARGET, ...raw };
  if (cfg.d % cfg.n_heads !== 0) {
    throw new Error(`d=${cfg.d} not divisible by n_heads=${cfg.n_heads}`);
  }
  if (cfg.n_blocks < 1) {
    throw new Error("n_blocks must be >= 1");
  }
  return cfg;
}

export function canonicalShapes(cfg: TargetConfig): Map<string, number[]> {
  const { d } = cfg;
  const m = d * cfg.mlp_ratio;
  const shapes = new Map<string, number[]>([
    ["patch_proj.weight", [cfg.patch_dim, d]],
    ["patch_proj.bias", [d]],
    ["te", [cfg.t_p_max, d]],
    ["fe", [cfg.f_p_max, d]],
    ["cls", [d]],
    ["dist", [d]],
  ]);
  for (let i = 0; i < cfg.n_blocks; i++) {
    const p = `blocks.${i}`;
    shapes.set(`${p}.norm1.weight`, [d]);
    shapes.set(`${p}.norm1.bias`, [d]);
    shapes.set(`${p}.attn.qkv.weight`, [d, 3 * d]);
    shapes.set(`${p}.attn.qkv.bias`, [3 * d]);
    shapes.set(`${p}.attn.out.weight`, [d, d]);
    shapes.set(`${p}.attn.out.bias`, [d]);
    shapes.set(`${p}.norm2.weight`, [d]);
    shapes.set(`${p}.norm2.bias`, [d]);
    shapes.set(`${p}.mlp.fc1.weight`, [d, m]);
    shapes.set(`${p}.mlp.fc1.bias`, [m]);
    shapes.set(`${p}.mlp.fc2.weight`, [m, d]);
    shapes.set(`${p}.mlp.fc2.bias`, [d]);
  }
  shapes.set("final_norm.weight", [d]);
  shapes.set("final_norm.bias", [d]);
  shapes.set("head.weight", [d, cfg.n_labels]);
  shapes.set("head.bias", [cfg.n_labels]);
  return shapes;
}
