/* Parity verification between a converted archive and a reference.
 *
 * Tensor-level: per-tensor max-abs deltas between the two archives.
 * Forward-level: when the primary `maest` CLI is on PATH and a fixture
 * store is given, embeddings are extracted with both archives and compared;
 * running the *source* framework's model is reported as skipped (no torch
 * runtime here) — conversion remains usable either way.
 */

import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { TensorMap, numel, readArchive } from "./archive.js";

export interface TensorDelta {
  name: string;
  maxAbs: number;
}

export interface VerifyReport {
  bytesEqual: boolean;
  tensorDeltas: TensorDelta[];
  maxTensorDelta: number;
  forwardStatus: "ok" | "skipped";
  forwardNote: string;
  maxForwardDelta: number | null;
  sourceRunStatus: "skipped";
  sourceRunNote: string;
  pass: boolean;
}

export function tensorDeltas(a: TensorMap, b: TensorMap): TensorDelta[] {
  const names = new Set([...a.keys(), ...b.keys()]);
  const deltas: TensorDelta[] = [];
  for (const name of [...names].sort()) {
    const ta = a.get(name);
    const tb = b.get(name);
    if (!ta || !tb) {
      deltas.push({ name, maxAbs: Infinity });
      continue;
    }
    if (numel(ta.shape) !== numel(tb.shape)) {
      deltas.push({ name, maxAbs: Infinity });
      continue;
    }
    let max = 0;
    for (let i = 0; i < ta.data.length; i++) {
      max = Math.max(max, Math.abs(ta.data[i] - tb.data[i]));
    }
    deltas.push({ name, maxAbs: max });
  }
  return deltas;
}

function maestAvailable(maestBin: string[]): boolean {
  try {
    execFileSync(maestBin[0], [...maestBin.slice(1), "--help"], { stdio: "pipe" });
    return true;
  } catch {
    return false;
  }
}

interface FixtureOptions {
  store: string;
  stats: string;
  espec: string;
  configIni?: string;
  maestBin?: string[]; // default: ["maest"]
}

function extractEmbeddings(maestBin: string[], archivePath: string, fx: FixtureOptions, outDir: string): Float32Array {
  const args = [
    ...maestBin.slice(1),
    "embed",
    "--store", fx.store,
    "--weights", archivePath,
    "--stats", fx.stats,
    "--espec", fx.espec,
    "--out", outDir,
  ];
  if (fx.configIni) {
    args.push("--config", fx.configIni);
  }
  execFileSync(maestBin[0], args, { stdio: "pipe" });
  const manifest = JSON.parse(readFileSync(join(outDir, "embeddings", "manifest.json"), "utf8"));
  const parts: Buffer[] = [];
  for (const split of Object.keys(manifest.splits).sort()) {
    parts.push(readFileSync(join(outDir, "embeddings", `${split}.f32`)));
  }
  const bytes = Buffer.concat(parts);
  const data = new Float32Array(bytes.length / 4);
  for (let i = 0; i < data.length; i++) {
    data[i] = bytes.readFloatLE(i * 4);
  }
  return data;
}

export function verify(
  archivePath: string,
  referencePath: string,
  fixture: FixtureOptions | null,
  threshold = 1e-4,
): VerifyReport {
  const archiveBytes = readFileSync(archivePath);
  const referenceBytes = readFileSync(referencePath);
  const bytesEqual = archiveBytes.equals(referenceBytes);
  const deltas = tensorDeltas(readArchive(archiveBytes), readArchive(referenceBytes));
  const maxTensorDelta = deltas.reduce((m, d) => Math.max(m, d.maxAbs), 0);

  let forwardStatus: "ok" | "skipped" = "skipped";
  let forwardNote = "no fixture store given";
  let maxForwardDelta: number | null = null;
  if (fixture) {
    const maestBin = fixture.maestBin ?? ["maest"];
    if (!maestAvailable(maestBin)) {
      forwardNote = `primary CLI (${maestBin.join(" ")}) not available; forward parity skipped`;
    } else {
      const workdir = mkdtempSync(join(tmpdir(), "ckptconv-verify-"));
      try {
        const a = extractEmbeddings(maestBin, archivePath, fixture, join(workdir, "a"));
        const b = extractEmbeddings(maestBin, referencePath, fixture, join(workdir, "b"));
        if (a.length !== b.length) {
          throw new Error(`embedding sizes differ: ${a.length} vs ${b.length}`);
        }
        let max = 0;
        for (let i = 0; i < a.length; i++) {
          max = Math.max(max, Math.abs(a[i] - b[i]));
        }
        maxForwardDelta = max;
        forwardStatus = "ok";
        forwardNote = `block-token embedding deltas over the fixture store`;
      } finally {
        rmSync(workdir, { recursive: true, force: true });
      }
    }
  }

  const pass =
    maxTensorDelta <= threshold && (maxForwardDelta === null || maxForwardDelta <= threshold);
  return {
    bytesEqual,
    tensorDeltas: deltas,
    maxTensorDelta,
    forwardStatus,
    forwardNote,
    maxForwardDelta,
    sourceRunStatus: "skipped",
    sourceRunNote: "source research-framework runtime not available in this tool",
    pass,
  };
}

export function writeReport(report: VerifyReport, path: string): void {
  writeFileSync(path, JSON.stringify(report, null, 2) + "\n");
}
