/** Shared helpers for the test suite. */

import * as path from 'node:path';
import * as url from 'node:url';
import { Writable } from 'node:stream';
import {
  ImagePayload,
  MAGIC_ERROR,
  MAGIC_FINE_TUNE,
  MAGIC_RESPONSE,
  MAGIC_SHUTDOWN,
  TuneSample,
  encodeRequest,
} from '../src/wire.js';

const here = path.dirname(url.fileURLToPath(import.meta.url));

export function fixture(...parts: string[]): string {
  return path.join(here, 'fixtures', ...parts);
}

export const SHUTDOWN_FRAME = Buffer.from(MAGIC_SHUTDOWN, 'latin1');

/** Feed a byte buffer in fixed-size dribbles to exercise reassembly. */
export async function* dribble(buf: Buffer, chunk = 7): AsyncGenerator<Buffer> {
  for (let at = 0; at < buf.length; at += chunk) {
    yield buf.subarray(at, Math.min(at + chunk, buf.length));
  }
}

/** Writable that keeps everything written to it. */
export class CollectSink extends Writable {
  private chunks: Buffer[] = [];

  override _write(chunk: Buffer, _enc: string, done: (err?: Error) => void): void {
    this.chunks.push(Buffer.from(chunk));
    done();
  }

  bytes(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

export type Reply =
  | { type: 'scores'; w: number; h: number; values: Float32Array }
  | { type: 'error'; message: string }
  | { type: 'ack'; n: number };

/** Split a concatenation of response frames back into typed replies. */
export function parseReplies(buf: Buffer): Reply[] {
  const replies: Reply[] = [];
  let at = 0;
  while (at < buf.length) {
    const magic = buf.subarray(at, at + 4).toString('latin1');
    at += 4;
    if (magic === MAGIC_RESPONSE) {
      const w = buf.readUInt32LE(at);
      const h = buf.readUInt32LE(at + 4);
      at += 8;
      const values = new Float32Array(w * h);
      for (let i = 0; i < values.length; i++) values[i] = buf.readFloatLE(at + i * 4);
      at += values.length * 4;
      replies.push({ type: 'scores', w, h, values });
    } else if (magic === MAGIC_ERROR) {
      const len = buf.readUInt32LE(at);
      at += 4;
      replies.push({ type: 'error', message: buf.subarray(at, at + len).toString('utf-8') });
      at += len;
    } else if (magic === MAGIC_FINE_TUNE) {
      replies.push({ type: 'ack', n: buf.readUInt32LE(at) });
      at += 4;
    } else {
      throw new Error(`response stream carries unknown magic ${JSON.stringify(magic)} at ${at - 4}`);
    }
  }
  return replies;
}

/** Encode a fine-tune frame the way the toolkit does. */
export function encodeFineTune(samples: TuneSample[]): Buffer {
  const header = Buffer.from(JSON.stringify({ n_samples: samples.length }), 'utf-8');
  const prefix = Buffer.allocUnsafe(8);
  prefix.write(MAGIC_FINE_TUNE, 0, 'latin1');
  prefix.writeUInt32LE(header.length, 4);
  const parts: Buffer[] = [prefix, header];
  for (const sample of samples) {
    // a sample block is a request body (image + input mask) plus the target
    parts.push(encodeRequest(sample.image, sample.input).subarray(4), Buffer.from(sample.target));
  }
  return Buffer.concat(parts);
}

/** Deterministic little test image: a bright box on a dark ramp. */
export function testImage(w: number, h: number, channels: 1 | 3 = 3): ImagePayload {
  const data = new Uint8Array(w * h * channels);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const inBox = x >= w / 4 && x < (3 * w) / 4 && y >= h / 4 && y < (3 * h) / 4;
      const v = inBox ? 220 : (x * 31 + y * 17) % 96;
      for (let c = 0; c < channels; c++) data[(y * w + x) * channels + c] = v;
    }
  }
  return { width: w, height: h, channels, data };
}

/** Mask of the bright box in testImage. */
export function testMask(w: number, h: number): Uint8Array {
  const data = new Uint8Array(w * h);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      data[y * w + x] = x >= w / 4 && x < (3 * w) / 4 && y >= h / 4 && y < (3 * h) / 4 ? 255 : 0;
    }
  }
  return data;
}

/** IoU of thresholded scores against a byte mask. */
export function iou(scores: Float32Array, gt: Uint8Array, threshold = 0.5): number {
  let inter = 0;
  let union = 0;
  for (let i = 0; i < scores.length; i++) {
    const p = scores[i] >= threshold;
    const t = gt[i] !== 0;
    if (p && t) inter++;
    if (p || t) union++;
  }
  return union === 0 ? 1 : inter / union;
}

/** Mean binary cross-entropy of scores against a byte mask. */
export function bceLoss(scores: Float32Array, gt: Uint8Array): number {
  let total = 0;
  for (let i = 0; i < scores.length; i++) {
    const p = Math.min(1 - 1e-7, Math.max(1e-7, scores[i]));
    total -= gt[i] !== 0 ? Math.log(p) : Math.log(1 - p);
  }
  return total / scores.length;
}

/** Translate a mask, clipping at the borders; pixels shifted in are empty. */
export function shiftMask(mask: Uint8Array, w: number, h: number, dx: number, dy: number): Uint8Array {
  const out = new Uint8Array(w * h);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const sx = x - dx;
      const sy = y - dy;
      if (sx >= 0 && sx < w && sy >= 0 && sy < h) out[y * w + x] = mask[sy * w + sx];
    }
  }
  return out;
}

export function verdict(ok: boolean, name: string, detail: string): void {
  console.log(`[${ok ? 'PASS' : 'FAIL'}] ${name}: ${detail}`);
  if (!ok) throw new Error(`[FAIL] ${name}: ${detail}`);
}
