#!/usr/bin/env node
/* ckptconv: convert research checkpoints to the MAEST archive and verify.
 *
 *   ckptconv convert --src model.safetensors --map maps/passt-s.json \
 *       --target-config target.json --out model.wts
 *   ckptconv verify --archive model.wts --reference ref.wts \
 *       [--store STORE --stats stats.json --espec 7:cls ...] [--report out.json]
 *   ckptconv export --archive model.wts --out model.safetensors
 */

import { readFileSync, writeFileSync } from "node:fs";
import { basename } from "node:path";

import { readArchive } from "./archive.js";
import { loadTargetConfig } from "./canonical.js";
import { convert } from "./convert.js";
import { loadNameMap } from "./namemap.js";
import { readSafetensors, writeSafetensors } from "./safetensors.js";
import { verify, writeReport } from "./verify.js";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (!arg.startsWith("--")) {
      throw new Error(`unexpected argument ${arg}`);
    }
    const value = argv[i + 1];
    if (value === undefined || value.startsWith("--")) {
      flags.set(arg.slice(2), "true");
    } else {
      flags.set(arg.slice(2), value);
      i++;
    }
  }
  return flags;
}

function need(flags: Map<string, string>, name: string): string {
  const value = flags.get(name);
  if (!value) {
    throw new Error(`missing required flag --${name}`);
  }
  return value;
}

function loadSource(path: string) {
  const buf = readFileSync(path);
  if (buf.length >= 8 && buf.toString("latin1", 0, 8) === "MAESTWTS") {
    return readArchive(buf);
  }
  return readSafetensors(buf).tensors;
}

function cmdConvert(flags: Map<string, string>): number {
  const src = need(flags, "src");
  const mapPath = need(flags, "map");
  const outPath = need(flags, "out");
  const targetRaw = flags.get("target-config");
  const cfg = loadTargetConfig(targetRaw ? JSON.parse(readFileSync(targetRaw, "utf8")) : {});
  const source = loadSource(src);
  const map = loadNameMap(mapPath);
  const result = convert(source, map, cfg);
  writeFileSync(outPath, result.archive);
  const provenancePath = flags.get("provenance") ?? `${outPath}.provenance.json`;
  writeFileSync(
    provenancePath,
    JSON.stringify(
      {
        source: basename(src),
        map: basename(mapPath),
        tensors: result.provenance,
        unconsumed_sources: result.unconsumedSources,
      },
      null,
      2,
    ) + "\n",
  );
  console.log(`wrote ${result.provenance.length} tensors to ${outPath}`);
  if (result.unconsumedSources.length > 0) {
    console.log(`unconsumed source tensors (${result.unconsumedSources.length}): ` +
      result.unconsumedSources.slice(0, 8).join(", ") +
      (result.unconsumedSources.length > 8 ? ", ..." : ""));
  }
  return 0;
}

function cmdVerify(flags: Map<string, string>): number {
  const archive = need(flags, "archive");
  const reference = need(flags, "reference");
  const fixture = flags.has("store")
    ? {
        store: need(flags, "store"),
        stats: need(flags, "stats"),
        espec: flags.get("espec") ?? "1:cls",
        configIni: flags.get("config"),
        maestBin: (flags.get("maest-bin") ?? "maest").split(" "),
      }
    : null;
  const threshold = Number(flags.get("threshold") ?? "1e-4");
  const report = verify(archive, reference, fixture, threshold);
  if (flags.has("report")) {
    writeReport(report, flags.get("report")!);
  }
  console.log(`bytes equal: ${report.bytesEqual}`);
  console.log(`max tensor delta: ${report.maxTensorDelta}`);
  if (report.forwardStatus === "ok") {
    console.log(`max forward delta: ${report.maxForwardDelta} (${report.forwardNote})`);
  } else {
    console.log(`warning: forward parity skipped: ${report.forwardNote}`);
  }
  console.log(`warning: ${report.sourceRunNote}`);
  console.log(report.pass ? "PASS" : "FAIL");
  return report.pass ? 0 : 1;
}

function cmdExport(flags: Map<string, string>): number {
  const archivePath = need(flags, "archive");
  const outPath = need(flags, "out");
  const tensors = readArchive(readFileSync(archivePath));
  writeFileSync(outPath, writeSafetensors(tensors, { format: "maest-archive-export" }));
  console.log(`exported ${tensors.size} tensors to ${outPath}`);
  return 0;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    const flags = parseFlags(rest);
    switch (command) {
      case "convert":
        return cmdConvert(flags);
      case "verify":
        return cmdVerify(flags);
      case "export":
        return cmdExport(flags);
      default:
        console.error(
          "usage: ckptconv <convert|verify|export> [flags]\n" +
            "  convert --src SRC --map MAP.json [--target-config CFG.json] --out OUT.wts\n" +
            "  verify  --archive A.wts --reference B.wts [--store S --stats J --espec E]\n" +
            "  export  --archive A.wts --out OUT.safetensors",
        );
        return 1;
    }
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

const invokedDirectly = process.argv[1] && import.meta.url.endsWith(basename(process.argv[1]));
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
