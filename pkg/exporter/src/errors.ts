/** Typed failures so callers can branch without parsing messages. */

export class ExporterError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

/** The manifest or the exemplar file is structurally invalid. */
export class ManifestError extends ExporterError {}

/** The encoder identifier cannot be resolved, or the encoder cannot serve. */
export class EncoderLoadFailure extends ExporterError {}

/** An encoder returned vectors of a width other than the manifest dimension. */
export class DimensionMismatch extends ExporterError {}

/** The same key appears twice (in the exemplars or in a vector file). */
export class DuplicateKey extends ExporterError {}

/** A vector file does not start with the expected magic bytes. */
export class BadMagic extends ExporterError {}

/** A vector file declares a format version this reader does not speak. */
export class BadVersion extends ExporterError {}

/** A vector file ends before its own headers say it should. */
export class TruncatedFile extends ExporterError {}
