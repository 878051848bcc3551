/**
 * Export manifests and exemplar files.
 *
 * A manifest is a small JSON document naming the encoder, the exemplar
 * JSONL (one {"key", "text"} object per line), the output path, the
 * vector dimension, and the pooling mode for token-level encoders.
 * Relative paths are resolved against the manifest's own directory so a
 * manifest can travel with its data.
 */

import { promises as fs } from "node:fs";
import { dirname, isAbsolute, resolve } from "node:path";

import { z } from "zod";

import { DuplicateKey, ManifestError } from "./errors.js";

export type Pooling = "cls" | "mean";

const manifestSchema = z.object({
  encoder: z.string().min(1),
  exemplars: z.string().min(1),
  output: z.string().min(1),
  dimension: z.number().int().positive().default(768),
  pooling: z.enum(["cls", "mean"]).default("mean"),
});

export interface ExportManifest {
  encoder: string;
  exemplars: string;
  output: string;
  dimension: number;
  pooling: Pooling;
}

export interface Exemplar {
  key: string;
  text: string;
}

function resolveAgainst(base: string, path: string): string {
  return isAbsolute(path) ? path : resolve(base, path);
}

export async function loadManifest(path: string): Promise<ExportManifest> {
  let raw: string;
  try {
    raw = await fs.readFile(path, "utf-8");
  } catch {
    throw new ManifestError(`manifest not found: ${path}`);
  }
  let parsed: unknown;
  try {
    parsed = JSON.parse(raw);
  } catch (cause) {
    throw new ManifestError(`${path}: not valid JSON: ${String(cause)}`);
  }
  const result = manifestSchema.safeParse(parsed);
  if (!result.success) {
    const issue = result.error.issues[0];
    throw new ManifestError(`${path}: ${issue?.path.join(".") ?? "?"}: ${issue?.message ?? "invalid"}`);
  }
  const base = dirname(resolve(path));
  return {
    ...result.data,
    exemplars: resolveAgainst(base, result.data.exemplars),
    output: resolveAgainst(base, result.data.output),
  };
}

const exemplarSchema = z.object({ key: z.string().min(1), text: z.string() });

/** Read the exemplar JSONL, preserving order and rejecting repeated keys. */
export async function loadExemplars(path: string): Promise<Exemplar[]> {
  let raw: string;
  try {
    raw = await fs.readFile(path, "utf-8");
  } catch {
    throw new ManifestError(`exemplar file not found: ${path}`);
  }
  const exemplars: Exemplar[] = [];
  const seen = new Set<string>();
  const lines = raw.split("\n");
  for (let index = 0; index < lines.length; index++) {
    const line = (lines[index] as string).trim();
    if (!line) {
      continue;
    }
    let row: unknown;
    try {
      row = JSON.parse(line);
    } catch (cause) {
      throw new ManifestError(`${path}:${index + 1}: not valid JSON: ${String(cause)}`);
    }
    const result = exemplarSchema.safeParse(row);
    if (!result.success) {
      throw new ManifestError(`${path}:${index + 1}: expected {"key", "text"} with a non-empty key`);
    }
    if (!result.data.text.trim()) {
      throw new ManifestError(`${path}:${index + 1}: empty text for key ${JSON.stringify(result.data.key)}`);
    }
    if (seen.has(result.data.key)) {
      throw new DuplicateKey(`${path}:${index + 1}: key ${JSON.stringify(result.data.key)} appears twice`);
    }
    seen.add(result.data.key);
    exemplars.push(result.data);
  }
  return exemplars;
}
