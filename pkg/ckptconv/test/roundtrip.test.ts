/* End-to-end round trip against the primary engine.
 *
 * A python fixture script builds a reference archive plus a tiny fixture
 * store with the installed `maest` package; the tests then re-serialize the
 * archive through safetensors, convert it back, require byte identity, and
 * run forward parity through the primary CLI. Skipped with a warning when
 * the primary is not installed.
 */

import { execFileSync } from "node:child_process";
import { existsSync, mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { beforeAll, describe, expect, it } from "vitest";

import { readArchive, writeArchive } from "../src/archive.js";
import { loadTargetConfig } from "../src/canonical.js";
import { convert } from "../src/convert.js";
import { loadNameMap } from "../src/namemap.js";
import { readSafetensors, writeSafetensors } from "../src/safetensors.js";
import { verify } from "../src/verify.js";

const FIXTURE_SCRIPT = new URL("./make_fixture.py", import.meta.url).pathname;
const IDENTITY_MAP = new URL("../maps/identity.json", import.meta.url).pathname;

let fixtureDir: string | null = null;

function primaryAvailable(): boolean {
  try {
    execFileSync("python3", ["-c", "import maest"], { stdio: "pipe" });
    return true;
  } catch {
    return false;
  }
}

beforeAll(() => {
  if (!primaryAvailable()) {
    console.warn("warning: primary maest package unavailable; round-trip tests skipped");
    return;
  }
  fixtureDir = mkdtempSync(join(tmpdir(), "ckptconv-fixture-"));
  execFileSync("python3", [FIXTURE_SCRIPT, fixtureDir], { stdio: "pipe" });
});

describe("primary round trip", () => {
  it("archive -> safetensors -> convert is byte-identical", () => {
    if (!fixtureDir) return; // skipped-with-warning
    const referencePath = join(fixtureDir, "reference.wts");
    const reference = readFileSync(referencePath);
    const exported = writeSafetensors(readArchive(reference));
    const srcPath = join(fixtureDir, "reference.safetensors");
    writeFileSync(srcPath, exported);

    const targetCfg = JSON.parse(readFileSync(join(fixtureDir, "target.json"), "utf8"));
    const result = convert(
      readSafetensors(readFileSync(srcPath)).tensors,
      loadNameMap(IDENTITY_MAP),
      loadTargetConfig(targetCfg),
    );
    expect(result.archive.equals(reference)).toBe(true);
    writeFileSync(join(fixtureDir, "converted.wts"), result.archive);
  });

  it("forward parity through the primary CLI is exactly zero", () => {
    if (!fixtureDir) return;
    const converted = join(fixtureDir, "converted.wts");
    if (!existsSync(converted)) return;
    const report = verify(
      converted,
      join(fixtureDir, "reference.wts"),
      {
        store: join(fixtureDir, "store"),
        stats: join(fixtureDir, "stats.json"),
        espec: "2:cls,2:dist,2:avg",
        configIni: join(fixtureDir, "config.ini"),
        maestBin: ["python3", "-m", "maest.cli"],
      },
      1e-4,
    );
    expect(report.bytesEqual).toBe(true);
    expect(report.maxTensorDelta).toBe(0);
    expect(report.forwardStatus).toBe("ok");
    expect(report.maxForwardDelta).toBe(0);
    expect(report.pass).toBe(true);
  });

  it("flags a tampered projector above threshold", () => {
    if (!fixtureDir) return;
    const reference = readFileSync(join(fixtureDir, "reference.wts"));
    const tensors = readArchive(reference);
    const proj = tensors.get("patch_proj.weight")!;
    const tampered = new Float32Array(proj.data);
    tampered[0] += 1.0;
    tensors.set("patch_proj.weight", { shape: proj.shape, data: tampered });
    const tamperedPath = join(fixtureDir, "tampered.wts");
    writeFileSync(tamperedPath, writeArchive(tensors));
    const report = verify(tamperedPath, join(fixtureDir, "reference.wts"), null, 1e-4);
    expect(report.bytesEqual).toBe(false);
    expect(report.maxTensorDelta).toBeGreaterThan(1e-4);
    expect(report.pass).toBe(false);
  });

  it("verify reports skipped-with-warning without the primary CLI", () => {
    if (!fixtureDir) return;
    const report = verify(
      join(fixtureDir, "reference.wts"),
      join(fixtureDir, "reference.wts"),
      {
        store: join(fixtureDir, "store"),
        stats: join(fixtureDir, "stats.json"),
        espec: "1:cls",
        maestBin: ["definitely-not-a-real-binary"],
      },
      1e-4,
    );
    expect(report.forwardStatus).toBe("skipped");
    expect(report.pass).toBe(true); // conversion still usable
  });
});
