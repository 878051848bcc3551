/**
 * Encoders: text in, fixed-width float64 vectors out.
 *
 * Two families are supported. The "hash" encoder derives vectors from
 * sha256 in counter mode and exists so exports are reproducible with no
 * model at all; it implements the same published definition as the
 * engine's hash embedding backend, bit for bit. An http(s) URL selects
 * a remote encoder service speaking the /embeddings wire shape, with
 * optional token-level output that the configured pooling collapses.
 */

import { createHash } from "node:crypto";

import { DimensionMismatch, EncoderLoadFailure } from "./errors.js";
import type { Pooling } from "./manifest.js";

export interface Encoder {
  /** Identifier echoed into reports. */
  readonly id: string;
  /** True when repeated runs produce identical vectors. */
  readonly deterministic: boolean;
  /** Encode a batch of texts into vectors of the manifest dimension. */
  encode(texts: string[]): Promise<Float64Array[]>;
}

const API_KEY_ENV = "MEDAIDE_API_KEY";

/**
 * Deterministic pseudo-embeddings from sha256 in counter mode.
 *
 * The digest of the exact text bytes seeds a counter-mode stream; each
 * little-endian 32-bit word maps to [-1, 1) and the result is
 * L2-normalized with a left-to-right sum of squares. Every operation is
 * IEEE-754 double precision, so the vectors are reproducible bit for
 * bit in any language from this description. This is a sentence-level
 * encoder: it emits one vector per text and pooling does not apply.
 */
export class HashEncoder implements Encoder {
  readonly id = "hash";
  readonly deterministic = true;

  constructor(private readonly dimension: number) {}

  encodeOne(text: string): Float64Array {
    const seed = createHash("sha256").update(Buffer.from(text, "utf-8")).digest();
    const values = new Float64Array(this.dimension);
    let filled = 0;
    let counter = 0;
    while (filled < this.dimension) {
      const block = Buffer.alloc(4);
      block.writeUInt32LE(counter, 0);
      const digest = createHash("sha256").update(seed).update(block).digest();
      for (let word = 0; word < 8 && filled < this.dimension; word++) {
        values[filled] = digest.readUInt32LE(word * 4) / 2147483648.0 - 1.0;
        filled++;
      }
      counter++;
    }
    // Left-to-right accumulation is part of the cross-language contract.
    let total = 0.0;
    for (let i = 0; i < this.dimension; i++) {
      total += (values[i] as number) * (values[i] as number);
    }
    const norm = Math.sqrt(total);
    if (norm < 1e-12) {
      throw new EncoderLoadFailure("degenerate hash vector");
    }
    for (let i = 0; i < this.dimension; i++) {
      values[i] = (values[i] as number) / norm;
    }
    return values;
  }

  async encode(texts: string[]): Promise<Float64Array[]> {
    return texts.map((text) => this.encodeOne(text));
  }
}

interface EmbeddingRow {
  embedding?: number[];
  tokens?: number[][];
}

function poolTokens(tokens: number[][], pooling: Pooling, dimension: number): Float64Array {
  if (tokens.length === 0) {
    throw new EncoderLoadFailure("encoder returned an empty token sequence");
  }
  for (const row of tokens) {
    if (row.length !== dimension) {
      throw new DimensionMismatch(`token vector has ${row.length} values, want ${dimension}`);
    }
  }
  const pooled = new Float64Array(dimension);
  if (pooling === "cls") {
    const first = tokens[0] as number[];
    for (let i = 0; i < dimension; i++) {
      pooled[i] = first[i] as number;
    }
    return pooled;
  }
  for (const row of tokens) {
    for (let i = 0; i < dimension; i++) {
      pooled[i] = (pooled[i] as number) + (row[i] as number);
    }
  }
  for (let i = 0; i < dimension; i++) {
    pooled[i] = (pooled[i] as number) / tokens.length;
  }
  return pooled;
}

/**
 * Remote encoder behind POST {baseUrl}/embeddings.
 *
 * Request: {"model": ..., "input": [texts...]}. Each reply row carries
 * either a pooled "embedding" or token-level "tokens" that this side
 * pools (cls takes the first token vector, mean averages them).
 */
export class HttpEncoder implements Encoder {
  readonly deterministic = false;
  readonly id: string;
  private readonly baseUrl: string;
  private readonly model: string;

  constructor(
    identifier: string,
    private readonly dimension: number,
    private readonly pooling: Pooling,
    private readonly batchSize = 64,
  ) {
    this.id = identifier;
    const hash = identifier.indexOf("#");
    this.baseUrl = (hash < 0 ? identifier : identifier.slice(0, hash)).replace(/\/+$/, "");
    this.model = hash < 0 ? "default" : identifier.slice(hash + 1);
  }

  private async encodeBatch(texts: string[]): Promise<Float64Array[]> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    const key = process.env[API_KEY_ENV];
    if (key) {
      headers["Authorization"] = `Bearer ${key}`;
    }
    let response: Response;
    try {
      response = await fetch(`${this.baseUrl}/embeddings`, {
        method: "POST",
        headers,
        body: JSON.stringify({ model: this.model, input: texts }),
      });
    } catch (cause) {
      throw new EncoderLoadFailure(`encoder endpoint unreachable: ${String(cause)}`);
    }
    if (!response.ok) {
      throw new EncoderLoadFailure(`encoder endpoint returned ${response.status}: ${await response.text()}`);
    }
    const body = (await response.json()) as { data?: EmbeddingRow[] };
    const rows = body.data;
    if (!Array.isArray(rows) || rows.length !== texts.length) {
      throw new EncoderLoadFailure(`encoder reply has ${rows?.length ?? 0} rows for ${texts.length} inputs`);
    }
    return rows.map((row) => {
      if (row.tokens) {
        return poolTokens(row.tokens, this.pooling, this.dimension);
      }
      if (!row.embedding) {
        throw new EncoderLoadFailure("encoder reply row has neither embedding nor tokens");
      }
      if (row.embedding.length !== this.dimension) {
        throw new DimensionMismatch(`encoder returned ${row.embedding.length} values, want ${this.dimension}`);
      }
      return Float64Array.from(row.embedding);
    });
  }

  async encode(texts: string[]): Promise<Float64Array[]> {
    const vectors: Float64Array[] = [];
    for (let start = 0; start < texts.length; start += this.batchSize) {
      vectors.push(...(await this.encodeBatch(texts.slice(start, start + this.batchSize))));
    }
    return vectors;
  }
}

/** Resolve a manifest encoder identifier to a live encoder. */
export function loadEncoder(identifier: string, dimension: number, pooling: Pooling): Encoder {
  if (identifier === "hash") {
    return new HashEncoder(dimension);
  }
  if (identifier.startsWith("http://") || identifier.startsWith("https://")) {
    return new HttpEncoder(identifier, dimension, pooling);
  }
  throw new EncoderLoadFailure(
    `unknown encoder ${JSON.stringify(identifier)}: supported are "hash" and http(s) endpoint URLs`,
  );
}
