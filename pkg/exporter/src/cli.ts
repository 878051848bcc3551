#!/usr/bin/env node
/**
 * Command line entry point.
 *
 *   embedding-exporter export --manifest <file>
 *   embedding-exporter verify --manifest <file> [--file <path>]
 *
 * Exit codes: 0 success, 1 usage error, 2 bad manifest or exemplars,
 * 3 encoder or file failure (including a verify below the cosine floor).
 */

import { parseArgs } from "node:util";

import { DuplicateKey, ExporterError, ManifestError } from "./errors.js";
import { runExport, runVerify } from "./exporter.js";
import { loadManifest } from "./manifest.js";

const USAGE = `usage: embedding-exporter <export|verify> --manifest <file> [--file <path>]`;

async function main(argv: string[]): Promise<number> {
  let positionals: string[];
  let values: { manifest?: string; file?: string };
  try {
    ({ positionals, values } = parseArgs({
      args: argv,
      allowPositionals: true,
      options: {
        manifest: { type: "string" },
        file: { type: "string" },
      },
    }));
  } catch (cause) {
    console.error(`${USAGE}\n${String(cause)}`);
    return 1;
  }
  const command = positionals[0];
  if (positionals.length !== 1 || (command !== "export" && command !== "verify")) {
    console.error(USAGE);
    return 1;
  }
  if (!values.manifest) {
    console.error(`${USAGE}\n--manifest is required`);
    return 1;
  }

  try {
    const manifest = await loadManifest(values.manifest);
    if (command === "export") {
      const result = await runExport(manifest);
      console.log(
        `wrote ${result.count} vectors (d=${result.dimension}, ${result.bytes} bytes) to ${result.output}`,
      );
      return 0;
    }
    const report = await runVerify(manifest, values.file);
    console.log(JSON.stringify(report, null, 2));
    if (!report.ok) {
      console.error(`verify failed: min cosine ${report.minCosine} below floor`);
      return 3;
    }
    return 0;
  } catch (error) {
    if (error instanceof ManifestError || error instanceof DuplicateKey) {
      console.error(`manifest error: ${(error as Error).message}`);
      return 2;
    }
    if (error instanceof ExporterError) {
      console.error(`${error.name}: ${error.message}`);
      return 3;
    }
    throw error;
  }
}

main(process.argv.slice(2)).then(
  (code) => {
    process.exitCode = code;
  },
  (error) => {
    console.error(error);
    process.exitCode = 3;
  },
);
