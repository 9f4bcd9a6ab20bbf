/**
 * Binary wire protocol spoken with the masktrack toolkit.
 *
 * All integers are little-endian u32. Frames:
 *
 *     request   "MTRQ" | u32 header_len | JSON {"w","h","channels","has_mask"}
 *               | image bytes (w*h*channels u8, row-major)
 *               | mask bytes (w*h u8, present iff has_mask)
 *     response  "MTRS" | u32 w | u32 h | w*h float32 scores, row-major
 *     error     "MTER" | u32 msg_len | UTF-8 message
 *     tune      "MTFT" | u32 header_len | JSON {"n_samples"}
 *               | n_samples blocks, each a request frame body (has_mask true)
 *                 with the target mask bytes (w*h u8) appended
 *     tune ack  "MTFT" | u32 n_samples
 *     shutdown  "MTBY" (no body, no response)
 *
 * Mask bytes use the PNG convention: 255 foreground, 0 background; any
 * nonzero byte counts as foreground.
 */

export const MAGIC_REQUEST = 'MTRQ';
export const MAGIC_RESPONSE = 'MTRS';
export const MAGIC_ERROR = 'MTER';
export const MAGIC_FINE_TUNE = 'MTFT';
export const MAGIC_SHUTDOWN = 'MTBY';

export const MAX_HEADER = 1 << 20;

/** Protocol violation that poisons the byte stream; the connection is done. */
export class WireError extends Error {}

/**
 * A frame that decoded far enough to know its full byte length but carries
 * an unsupported payload; the stream stays aligned and serving can go on.
 */
export class BadFrameError extends WireError {}

export interface ImagePayload {
  width: number;
  height: number;
  channels: 1 | 3;
  /** w*h*channels bytes, row-major, u8. */
  data: Uint8Array;
}

export interface TuneSample {
  image: ImagePayload;
  /** Rough guidance mask, w*h bytes, nonzero = foreground. */
  input: Uint8Array;
  /** Ground-truth mask, same layout. */
  target: Uint8Array;
}

/** Pull-based exact reader over any async byte stream (socket, stdin). */
export class ByteSource {
  private iter: AsyncIterator<Buffer | Uint8Array>;
  private buf: Buffer = Buffer.alloc(0);
  private ended = false;

  constructor(stream: AsyncIterable<Buffer | Uint8Array>) {
    this.iter = stream[Symbol.asyncIterator]();
  }

  private async fill(n: number): Promise<boolean> {
    while (this.buf.length < n && !this.ended) {
      const next = await this.iter.next();
      if (next.done) {
        this.ended = true;
      } else {
        const chunk = Buffer.isBuffer(next.value) ? next.value : Buffer.from(next.value);
        this.buf = this.buf.length === 0 ? chunk : Buffer.concat([this.buf, chunk]);
      }
    }
    return this.buf.length >= n;
  }

  async read(n: number): Promise<Buffer> {
    if (!(await this.fill(n))) {
      throw new WireError(`stream closed ${n - this.buf.length} bytes short of a frame`);
    }
    const out = this.buf.subarray(0, n);
    this.buf = this.buf.subarray(n);
    return out;
  }

  /** Next frame magic, or null when the stream ends at a frame boundary. */
  async readMagic(): Promise<string | null> {
    if (!(await this.fill(4))) {
      if (this.buf.length === 0) return null;
      throw new WireError(`stream closed ${4 - this.buf.length} bytes short of a frame`);
    }
    return (await this.read(4)).toString('latin1');
  }

  async readU32(): Promise<number> {
    return (await this.read(4)).readUInt32LE(0);
  }
}

async function readHeader(
  source: ByteSource,
  required: string[],
): Promise<Record<string, unknown>> {
  const length = await source.readU32();
  if (length > MAX_HEADER) {
    throw new WireError(`header length ${length} exceeds the ${MAX_HEADER} byte cap`);
  }
  let header: unknown;
  try {
    header = JSON.parse((await source.read(length)).toString('utf-8'));
  } catch (exc) {
    throw new WireError(`malformed JSON header: ${exc}`);
  }
  if (typeof header !== 'object' || header === null || Array.isArray(header)) {
    throw new WireError('header must be a JSON object');
  }
  const doc = header as Record<string, unknown>;
  for (const key of required) {
    if (!(key in doc)) throw new WireError(`header is missing the '${key}' field`);
  }
  return doc;
}

const isU32 = (v: unknown): v is number =>
  typeof v === 'number' && Number.isInteger(v) && v >= 0;

interface RawBody {
  w: number;
  h: number;
  channels: number;
  pixels: Uint8Array;
  mask: Uint8Array | null;
  /** Set when the geometry is well framed but not one the backend serves. */
  problem: string | null;
}

/**
 * Consume one request body. A geometry the backend does not serve still
 * gets consumed in full when its byte length is well defined, so callers
 * can answer with an error frame and keep the stream aligned.
 */
async function readRawBody(source: ByteSource): Promise<RawBody> {
  const header = await readHeader(source, ['w', 'h', 'channels', 'has_mask']);
  const w = header['w'];
  const h = header['h'];
  const channels = header['channels'];
  const hasMask = header['has_mask'];
  if (!isU32(w) || !isU32(h) || !isU32(channels) || typeof hasMask !== 'boolean') {
    throw new WireError('header dimensions must be unsigned integers');
  }
  const payload = await source.read(w * h * channels + (hasMask ? w * h : 0));
  const problem =
    w < 1 || h < 1 || (channels !== 1 && channels !== 3)
      ? `unsupported request geometry ${w}x${h}x${channels}`
      : null;
  return {
    w,
    h,
    channels,
    pixels: new Uint8Array(payload.subarray(0, w * h * channels)),
    mask: hasMask ? new Uint8Array(payload.subarray(w * h * channels)) : null,
    problem,
  };
}

/** Decode one request body (everything after the MTRQ magic). */
export async function readRequestBody(
  source: ByteSource,
): Promise<{ image: ImagePayload; mask: Uint8Array | null }> {
  const body = await readRawBody(source);
  if (body.problem !== null) throw new BadFrameError(body.problem);
  return {
    image: {
      width: body.w,
      height: body.h,
      channels: body.channels as 1 | 3,
      data: body.pixels,
    },
    mask: body.mask,
  };
}

/** Decode the body of a tune frame (everything after the MTFT magic). */
export async function readFineTuneBody(source: ByteSource): Promise<TuneSample[]> {
  const header = await readHeader(source, ['n_samples']);
  const n = header['n_samples'];
  if (!isU32(n) || n < 1) {
    throw new WireError(`invalid fine-tune sample count ${JSON.stringify(n)}`);
  }
  const samples: TuneSample[] = [];
  let bad: string | null = null;
  for (let i = 0; i < n; i++) {
    const body = await readRawBody(source);
    const target = new Uint8Array(await source.read(body.w * body.h));
    if (body.problem !== null) {
      bad = bad ?? `sample ${i}: ${body.problem}`;
    } else if (body.mask === null) {
      bad = bad ?? `sample ${i}: fine-tune samples must carry an input mask`;
    } else {
      samples.push({
        image: {
          width: body.w,
          height: body.h,
          channels: body.channels as 1 | 3,
          data: body.pixels,
        },
        input: body.mask,
        target,
      });
    }
  }
  if (bad !== null) throw new BadFrameError(bad);
  return samples;
}

function encodeHeader(payload: Record<string, unknown>): Buffer {
  const header = Buffer.from(JSON.stringify(payload), 'utf-8');
  const out = Buffer.allocUnsafe(4 + header.length);
  out.writeUInt32LE(header.length, 0);
  header.copy(out, 4);
  return out;
}

export function encodeResponse(width: number, height: number, scores: Float32Array): Buffer {
  if (scores.length !== width * height) {
    throw new Error(`score map carries ${scores.length} values for ${width}x${height}`);
  }
  const out = Buffer.allocUnsafe(12 + scores.length * 4);
  out.write(MAGIC_RESPONSE, 0, 'latin1');
  out.writeUInt32LE(width, 4);
  out.writeUInt32LE(height, 8);
  for (let i = 0; i < scores.length; i++) out.writeFloatLE(scores[i], 12 + i * 4);
  return out;
}

export function encodeError(message: string): Buffer {
  const raw = Buffer.from(message, 'utf-8');
  const out = Buffer.allocUnsafe(8 + raw.length);
  out.write(MAGIC_ERROR, 0, 'latin1');
  out.writeUInt32LE(raw.length, 4);
  raw.copy(out, 8);
  return out;
}

export function encodeFineTuneAck(n: number): Buffer {
  const out = Buffer.allocUnsafe(8);
  out.write(MAGIC_FINE_TUNE, 0, 'latin1');
  out.writeUInt32LE(n, 4);
  return out;
}

/** Request encoder; the toolkit side normally writes these, tests need it. */
export function encodeRequest(image: ImagePayload, mask: Uint8Array | null): Buffer {
  const header = encodeHeader({
    w: image.width,
    h: image.height,
    channels: image.channels,
    has_mask: mask !== null,
  });
  const parts = [Buffer.from(MAGIC_REQUEST, 'latin1'), header, Buffer.from(image.data)];
  if (mask !== null) {
    if (mask.length !== image.width * image.height) {
      throw new Error('mask resolution does not match the image');
    }
    parts.push(Buffer.from(mask));
  }
  return Buffer.concat(parts);
}
