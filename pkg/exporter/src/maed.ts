/**
 * Binary vector-file codec.
 *
 * Layout, all integers little-endian:
 *   - 4 bytes magic "MAED"
 *   - u16 format version (currently 1)
 *   - u32 dimension, u32 record count
 *   - per record: u16 key byte-length, the UTF-8 key, dimension float32 values
 *
 * The reader is strict: wrong magic, an unknown version, a record cut
 * short, a duplicated key, or trailing bytes after the declared count
 * all reject the file. The writer is atomic (tmp file + rename) so a
 * crashed export never leaves a half-written file at the target path.
 */

import { promises as fs } from "node:fs";
import { dirname, join } from "node:path";

import { BadMagic, BadVersion, DuplicateKey, ManifestError, TruncatedFile } from "./errors.js";

const MAGIC = Buffer.from("MAED", "ascii");
const FORMAT_VERSION = 1;
const HEADER_BYTES = 14;

export interface VectorRecord {
  key: string;
  /** Vector as stored: float32 values. */
  values: Float32Array;
}

/** Serialize records to the binary layout. Record order is preserved. */
export function encodeVectorFile(records: VectorRecord[], dimension: number): Buffer {
  const parts: Buffer[] = [];
  const header = Buffer.alloc(HEADER_BYTES);
  MAGIC.copy(header, 0);
  header.writeUInt16LE(FORMAT_VERSION, 4);
  header.writeUInt32LE(dimension, 6);
  header.writeUInt32LE(records.length, 10);
  parts.push(header);

  for (const record of records) {
    const keyBytes = Buffer.from(record.key, "utf-8");
    if (keyBytes.length > 0xffff) {
      throw new ManifestError(`key too long for format: ${record.key.slice(0, 50)}...`);
    }
    if (record.values.length !== dimension) {
      throw new ManifestError(
        `vector for ${JSON.stringify(record.key)} has ${record.values.length} values, want ${dimension}`,
      );
    }
    const lead = Buffer.alloc(2);
    lead.writeUInt16LE(keyBytes.length, 0);
    parts.push(lead, keyBytes);

    const payload = Buffer.alloc(4 * dimension);
    for (let i = 0; i < dimension; i++) {
      payload.writeFloatLE(record.values[i] as number, i * 4); // little-endian f32
    }
    parts.push(payload);
  }
  return Buffer.concat(parts);
}

/** Parse the binary layout back into records, rejecting structural damage. */
export function decodeVectorFile(data: Buffer, label = "vector file"): { records: VectorRecord[]; dimension: number } {
  if (data.length < 4 || !data.subarray(0, 4).equals(MAGIC)) {
    throw new BadMagic(`${label}: expected magic "MAED"`);
  }
  if (data.length < HEADER_BYTES) {
    throw new TruncatedFile(`${label}: header cut short`);
  }
  const version = data.readUInt16LE(4);
  if (version !== FORMAT_VERSION) {
    throw new BadVersion(`${label}: version ${version}, supported ${FORMAT_VERSION}`);
  }
  const dimension = data.readUInt32LE(6);
  const count = data.readUInt32LE(10);
  const vectorBytes = 4 * dimension;

  const records: VectorRecord[] = [];
  const seen = new Set<string>();
  let offset = HEADER_BYTES;
  for (let index = 0; index < count; index++) {
    if (offset + 2 > data.length) {
      throw new TruncatedFile(`${label}: record ${index} key length cut short`);
    }
    const keyLength = data.readUInt16LE(offset);
    offset += 2;
    if (offset + keyLength + vectorBytes > data.length) {
      throw new TruncatedFile(`${label}: record ${index} cut short`);
    }
    const key = data.subarray(offset, offset + keyLength).toString("utf-8");
    offset += keyLength;
    if (seen.has(key)) {
      throw new DuplicateKey(`${label}: key ${JSON.stringify(key)} appears twice`);
    }
    seen.add(key);

    const values = new Float32Array(dimension);
    for (let i = 0; i < dimension; i++) {
      values[i] = data.readFloatLE(offset + i * 4);
    }
    offset += vectorBytes;
    records.push({ key, values });
  }
  if (offset !== data.length) {
    // Trailing garbage means the count header and the payload disagree.
    throw new TruncatedFile(`${label}: ${data.length - offset} unexpected trailing bytes`);
  }
  return { records, dimension };
}

/** Write the file atomically: serialize, write to a sibling tmp path, rename. */
export async function writeVectorFile(path: string, records: VectorRecord[], dimension: number): Promise<number> {
  const encoded = encodeVectorFile(records, dimension);
  const tmp = join(dirname(path), `.${Date.now()}-${process.pid}.maed.tmp`);
  await fs.writeFile(tmp, encoded);
  await fs.rename(tmp, path);
  return encoded.length;
}

export async function readVectorFile(path: string): Promise<{ records: VectorRecord[]; dimension: number }> {
  return decodeVectorFile(await fs.readFile(path), path);
}
