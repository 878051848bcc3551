/**
 * The two operations behind the CLI: export and verify.
 *
 * Export encodes every exemplar and writes the binary vector file in
 * exemplar order. Verify reads a vector file back, re-encodes the
 * exemplars, and reports how far the stored float32 vectors sit from
 * the recomputation, as a maximum absolute deviation and a minimum
 * cosine. With a deterministic encoder both are exact.
 */

import { loadEncoder } from "./encoders.js";
import { DimensionMismatch, ManifestError } from "./errors.js";
import type { ExportManifest } from "./manifest.js";
import { loadExemplars } from "./manifest.js";
import type { VectorRecord } from "./maed.js";
import { readVectorFile, writeVectorFile } from "./maed.js";

export interface ExportResult {
  output: string;
  encoder: string;
  count: number;
  dimension: number;
  bytes: number;
}

export interface VerifyReport {
  file: string;
  encoder: string;
  keys: number;
  dimension: number;
  /** Largest |stored - recomputed| over every value of every vector. */
  maxAbsDeviation: number;
  /** Smallest cosine(stored, recomputed) over all keys; 1.0 when empty. */
  minCosine: number;
  ok: boolean;
}

/** Acceptance floor for verify: vectors must sit within 1e-5 of cosine 1. */
export const COSINE_FLOOR = 1 - 1e-5;

async function encodeAll(manifest: ExportManifest): Promise<VectorRecord[]> {
  const exemplars = await loadExemplars(manifest.exemplars);
  const encoder = loadEncoder(manifest.encoder, manifest.dimension, manifest.pooling);
  const vectors = await encoder.encode(exemplars.map((exemplar) => exemplar.text));
  return exemplars.map((exemplar, index) => {
    const vector = vectors[index] as Float64Array;
    if (vector.length !== manifest.dimension) {
      throw new DimensionMismatch(
        `encoder produced ${vector.length} values for ${JSON.stringify(exemplar.key)}, want ${manifest.dimension}`,
      );
    }
    // Quantize here: float32 is the file's precision, so the in-memory
    // record and the file round-trip bit for bit.
    return { key: exemplar.key, values: Float32Array.from(vector) };
  });
}

export async function runExport(manifest: ExportManifest): Promise<ExportResult> {
  const records = await encodeAll(manifest);
  const bytes = await writeVectorFile(manifest.output, records, manifest.dimension);
  return {
    output: manifest.output,
    encoder: manifest.encoder,
    count: records.length,
    dimension: manifest.dimension,
    bytes,
  };
}

function cosine(a: Float32Array, b: Float32Array): number {
  let dot = 0.0;
  let normA = 0.0;
  let normB = 0.0;
  for (let i = 0; i < a.length; i++) {
    dot += (a[i] as number) * (b[i] as number);
    normA += (a[i] as number) * (a[i] as number);
    normB += (b[i] as number) * (b[i] as number);
  }
  if (normA === 0 || normB === 0) {
    return 0.0;
  }
  return dot / (Math.sqrt(normA) * Math.sqrt(normB));
}

export async function runVerify(manifest: ExportManifest, filePath?: string): Promise<VerifyReport> {
  const path = filePath ?? manifest.output;
  const { records, dimension } = await readVectorFile(path);
  if (dimension !== manifest.dimension) {
    throw new DimensionMismatch(`${path}: file dimension ${dimension}, manifest says ${manifest.dimension}`);
  }
  const recomputed = new Map((await encodeAll(manifest)).map((record) => [record.key, record.values]));
  if (records.length !== recomputed.size || records.some((record) => !recomputed.has(record.key))) {
    throw new ManifestError(`${path}: file keys do not match the exemplar set`);
  }

  let maxAbsDeviation = 0.0;
  let minCosine = 1.0;
  for (const record of records) {
    const fresh = recomputed.get(record.key) as Float32Array;
    for (let i = 0; i < dimension; i++) {
      const deviation = Math.abs((record.values[i] as number) - (fresh[i] as number));
      if (deviation > maxAbsDeviation) {
        maxAbsDeviation = deviation;
      }
    }
    const similarity = cosine(record.values, fresh);
    if (similarity < minCosine) {
      minCosine = similarity;
    }
  }
  return {
    file: path,
    encoder: manifest.encoder,
    keys: records.length,
    dimension,
    maxAbsDeviation,
    minCosine,
    ok: minCosine >= COSINE_FLOOR,
  };
}
