/** Reader for the export-train corpus layout.
 *
 * A corpus directory holds an index.json whose "samples" entries name three
 * PNGs each: the frame ("image"), a rough guidance mask ("input") and the
 * ground-truth mask ("target"). Masks are nonzero-is-foreground.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';
import { PNG } from 'pngjs';
import type { ImagePayload, TuneSample } from './wire.js';

interface IndexEntry {
  id: string;
  image: string;
  input: string;
  target: string;
  width: number;
  height: number;
}

export interface CorpusSample extends TuneSample {
  id: string;
}

function decodePng(file: string): PNG {
  return PNG.sync.read(fs.readFileSync(file));
}

/** Collapse pngjs RGBA output to packed RGB bytes. */
function rgbPayload(png: PNG): ImagePayload {
  const n = png.width * png.height;
  const data = new Uint8Array(n * 3);
  for (let i = 0; i < n; i++) {
    data[i * 3] = png.data[i * 4];
    data[i * 3 + 1] = png.data[i * 4 + 1];
    data[i * 3 + 2] = png.data[i * 4 + 2];
  }
  return { width: png.width, height: png.height, channels: 3, data };
}

function maskBytes(png: PNG): Uint8Array {
  const n = png.width * png.height;
  const data = new Uint8Array(n);
  for (let i = 0; i < n; i++) data[i] = png.data[i * 4] > 0 ? 255 : 0;
  return data;
}

export function readMaskPng(file: string): { width: number; height: number; data: Uint8Array } {
  const png = decodePng(file);
  return { width: png.width, height: png.height, data: maskBytes(png) };
}

export function readImagePng(file: string): ImagePayload {
  return rgbPayload(decodePng(file));
}

export function readCorpus(dir: string): CorpusSample[] {
  const indexPath = path.join(dir, 'index.json');
  if (!fs.existsSync(indexPath)) {
    throw new Error(`${dir} is not a corpus: missing index.json`);
  }
  const index = JSON.parse(fs.readFileSync(indexPath, 'utf-8'));
  if (!Array.isArray(index.samples)) {
    throw new Error(`${indexPath} has no "samples" list`);
  }
  return (index.samples as IndexEntry[]).map((entry) => {
    const image = readImagePng(path.join(dir, entry.image));
    const input = readMaskPng(path.join(dir, entry.input));
    const target = readMaskPng(path.join(dir, entry.target));
    for (const [name, got] of [
      ['image', image],
      ['input', input],
      ['target', target],
    ] as const) {
      if (got.width !== entry.width || got.height !== entry.height) {
        throw new Error(
          `sample ${entry.id}: ${name} is ${got.width}x${got.height}, ` +
            `index says ${entry.width}x${entry.height}`,
        );
      }
    }
    return { id: entry.id, image, input: input.data, target: target.data };
  });
}
