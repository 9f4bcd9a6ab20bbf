/**
 * The segmentation network: a small U-Net style encoder-decoder over a
 * 4-channel input (RGB plus guidance mask) with a sigmoid score head.
 *
 * The WASM backend ships no gradient kernels for convolution or pooling,
 * so every stage is built from ops whose gradients it does have:
 *
 *   - 3x3 convolution: concat of the nine shifted views, one matmul
 *   - downsampling: space-to-depth as reshape+transpose (lossless repack)
 *   - upsampling: depth-to-space, with a 16-logit subpixel head
 *
 * The input enters through two space-to-depth steps, so the body works at
 * quarter resolution (the usual trade of a dense-prediction net that
 * predicts at a coarse stride and upsamples). Skip connections and the raw
 * repacked input feed the head, which keeps full-resolution detail, in
 * particular the guidance channel, one linear layer away from the output.
 */

import * as fs from 'node:fs';
import * as tf from '@tensorflow/tfjs';
import type { ImagePayload } from './wire.js';

export const CHECKPOINT_FORMAT = 'masktrack-netbackend-v1';

/** Input channels: RGB plus the guidance mask. */
const IN_CHANNELS = 4;
/** Two entry repacks and one body repack; spatial dims must divide by this. */
export const STRIDE = 8;
/** Channels seen by the first body layer: IN_CHANNELS * 4 * 4. */
const ENTRY_CHANNELS = IN_CHANNELS * 16;

type ConvKind = 1 | 3;

interface LayerSpec {
  name: string;
  cin: number;
  cout: number;
  kind: ConvKind;
  /** Conv blocks get instance-norm scale/shift; the head stays linear. */
  normed: boolean;
}

function layerSpecs(base: number): LayerSpec[] {
  const b1 = base;
  const b2 = 2 * base;
  return [
    { name: 'proj', cin: ENTRY_CHANNELS, cout: b1, kind: 1, normed: true },
    { name: 'e1', cin: b1, cout: b1, kind: 3, normed: true },
    { name: 'e2', cin: 4 * b1, cout: b2, kind: 3, normed: true },
    { name: 'd1', cin: b2 / 4 + b1, cout: b1, kind: 3, normed: true },
    { name: 'head', cin: b1 + ENTRY_CHANNELS, cout: 16, kind: 1, normed: false },
  ];
}

/** Background prior for the head bias; keeps early training from thrashing. */
const HEAD_BIAS = -2;

export interface Checkpoint {
  format: string;
  base: number;
  weights: Record<string, { shape: number[]; data: string }>;
  lossCurve?: number[];
  note?: string;
}

function conv3(x: tf.Tensor4D, w: tf.Tensor, b: tf.Tensor): tf.Tensor4D {
  const [B, H, W, Cin] = x.shape;
  const Cout = b.shape[0] as number;
  const padded = tf.pad(x, [
    [0, 0],
    [1, 1],
    [1, 1],
    [0, 0],
  ]);
  const views: tf.Tensor4D[] = [];
  for (let dy = 0; dy < 3; dy++) {
    for (let dx = 0; dx < 3; dx++) {
      views.push(tf.slice(padded, [0, dy, dx, 0], [B, H, W, Cin]));
    }
  }
  const cols = tf.concat(views, 3).reshape([B * H * W, 9 * Cin]);
  return tf.add(tf.matMul(cols, w).reshape([B, H, W, Cout]), b);
}

function conv1(x: tf.Tensor4D, w: tf.Tensor, b: tf.Tensor): tf.Tensor4D {
  const [B, H, W, Cin] = x.shape;
  const Cout = b.shape[0] as number;
  return tf.add(tf.matMul(x.reshape([B * H * W, Cin]), w).reshape([B, H, W, Cout]), b);
}

function spaceToDepth(x: tf.Tensor4D): tf.Tensor4D {
  const [B, H, W, C] = x.shape;
  return x
    .reshape([B, H / 2, 2, W / 2, 2, C])
    .transpose([0, 1, 3, 2, 4, 5])
    .reshape([B, H / 2, W / 2, 4 * C]);
}

function depthToSpace(x: tf.Tensor4D): tf.Tensor4D {
  const [B, H, W, C] = x.shape;
  return x
    .reshape([B, H, W, 2, 2, C / 4])
    .transpose([0, 1, 3, 2, 4, 5])
    .reshape([B, H * 2, W * 2, C / 4]);
}

/** Per-sample, per-channel normalization over the spatial axes. */
function instanceNorm(x: tf.Tensor4D, g: tf.Tensor, s: tf.Tensor): tf.Tensor4D {
  const m = tf.mean(x, [1, 2], true);
  const centered = tf.sub(x, m);
  const v = tf.mean(tf.square(centered), [1, 2], true);
  return tf.add(tf.mul(tf.mul(centered, tf.rsqrt(tf.add(v, 1e-5))), g), s);
}

/** The tf engine registry is global; suffixes keep instances apart. */
let instanceCounter = 0;

export class SegNet {
  readonly base: number;
  /** Parameters by logical name ('proj_w', ...); checkpoints use these. */
  readonly params: Map<string, tf.Variable>;
  private readonly instance: number;

  constructor(base: number, seed = 0) {
    this.base = base;
    this.params = new Map();
    this.instance = instanceCounter++;
    let draw = 0;
    for (const spec of layerSpecs(base)) {
      const fan = (spec.kind === 3 ? 9 : 1) * spec.cin;
      const std = Math.sqrt(2 / fan);
      this.addParam(
        `${spec.name}_w`,
        tf.randomNormal([fan, spec.cout], 0, std, 'float32', seed * 8192 + draw++),
      );
      this.addParam(
        `${spec.name}_b`,
        spec.name === 'head' ? tf.fill([spec.cout], HEAD_BIAS) : tf.zeros([spec.cout]),
      );
      if (spec.normed) {
        this.addParam(`${spec.name}_g`, tf.ones([spec.cout]));
        this.addParam(`${spec.name}_s`, tf.zeros([spec.cout]));
      }
    }
  }

  private addParam(name: string, init: tf.Tensor): void {
    this.params.set(name, tf.variable(init, true, `${name}#${this.instance}`));
  }

  /** Logical name of one of this network's variables ('proj_w#3' -> 'proj_w'). */
  static logicalName(engineName: string): string {
    const at = engineName.indexOf('#');
    return at === -1 ? engineName : engineName.slice(0, at);
  }

  private p(name: string): tf.Variable {
    const v = this.params.get(name);
    if (v === undefined) throw new Error(`no parameter named ${name}`);
    return v;
  }

  /** Score map in [0,1]; input must be [B, H, W, 4] with H, W % STRIDE == 0. */
  forward(x: tf.Tensor4D): tf.Tensor4D {
    const [, H, W] = x.shape;
    if (H % STRIDE !== 0 || W % STRIDE !== 0) {
      throw new Error(`forward needs spatial dims divisible by ${STRIDE}, got ${H}x${W}`);
    }
    const block = (name: string, t: tf.Tensor4D, op: typeof conv1): tf.Tensor4D =>
      tf.relu(instanceNorm(op(t, this.p(`${name}_w`), this.p(`${name}_b`)), this.p(`${name}_g`), this.p(`${name}_s`)));
    const entry = spaceToDepth(spaceToDepth(x));
    const proj = block('proj', entry, conv1);
    const e1 = block('e1', proj, conv3);
    const e2 = block('e2', spaceToDepth(e1), conv3);
    const d1 = block('d1', tf.concat([depthToSpace(e2), e1], 3), conv3);
    const logits = conv1(tf.concat([d1, entry], 3), this.p('head_w'), this.p('head_b'));
    return tf.sigmoid(depthToSpace(depthToSpace(logits)));
  }

  /**
   * Score one request. Any resolution goes: the input is zero-padded up to
   * the stride and the scores cropped back. Gray images are replicated to
   * RGB; a missing guidance mask means an empty prior.
   */
  predict(image: ImagePayload, mask: Uint8Array | null): Float32Array {
    const { width: w, height: h, channels } = image;
    if (mask !== null && mask.length !== w * h) {
      throw new Error(`guidance mask carries ${mask.length} bytes for ${w}x${h}`);
    }
    const padW = Math.ceil(w / STRIDE) * STRIDE;
    const padH = Math.ceil(h / STRIDE) * STRIDE;
    const input = new Float32Array(padH * padW * IN_CHANNELS);
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        const src = y * w + x;
        const dst = (y * padW + x) * IN_CHANNELS;
        if (channels === 3) {
          input[dst] = image.data[src * 3] / 255;
          input[dst + 1] = image.data[src * 3 + 1] / 255;
          input[dst + 2] = image.data[src * 3 + 2] / 255;
        } else {
          const v = image.data[src] / 255;
          input[dst] = v;
          input[dst + 1] = v;
          input[dst + 2] = v;
        }
        input[dst + 3] = mask !== null && mask[src] !== 0 ? 1 : 0;
      }
    }
    const scores = tf.tidy(() => {
      const x = tf.tensor4d(input, [1, padH, padW, IN_CHANNELS]);
      const full = this.forward(x);
      return tf.slice(full, [0, 0, 0, 0], [1, h, w, 1]);
    });
    const data = scores.dataSync() as Float32Array;
    scores.dispose();
    // sigmoid output; the clamp only guards float32 rounding at the rails
    for (let i = 0; i < data.length; i++) data[i] = Math.min(1, Math.max(0, data[i]));
    return data;
  }

  /** Names of the weight matrices (weight decay applies to these only). */
  isDecayed(name: string): boolean {
    return name.endsWith('_w');
  }

  toCheckpoint(extra: Partial<Checkpoint> = {}): Checkpoint {
    const weights: Checkpoint['weights'] = {};
    for (const [name, v] of this.params) {
      const data = v.dataSync() as Float32Array;
      weights[name] = {
        shape: v.shape.slice(),
        data: Buffer.from(data.buffer, data.byteOffset, data.byteLength).toString('base64'),
      };
    }
    return { format: CHECKPOINT_FORMAT, base: this.base, weights, ...extra };
  }

  static fromCheckpoint(checkpoint: Checkpoint): SegNet {
    if (checkpoint.format !== CHECKPOINT_FORMAT) {
      throw new Error(`unknown checkpoint format ${JSON.stringify(checkpoint.format)}`);
    }
    const net = new SegNet(checkpoint.base);
    for (const [name, v] of net.params) {
      const stored = checkpoint.weights[name];
      if (stored === undefined) throw new Error(`checkpoint is missing ${name}`);
      const raw = Buffer.from(stored.data, 'base64');
      const values = new Float32Array(raw.buffer, raw.byteOffset, raw.byteLength / 4);
      if (values.length !== v.size) {
        throw new Error(`checkpoint weight ${name} has ${values.length} values, need ${v.size}`);
      }
      v.assign(tf.tensor(values, v.shape as number[]));
    }
    return net;
  }

  save(path: string, extra: Partial<Checkpoint> = {}): void {
    fs.writeFileSync(path, JSON.stringify(this.toCheckpoint(extra)) + '\n');
  }

  static load(path: string): { net: SegNet; checkpoint: Checkpoint } {
    const checkpoint = JSON.parse(fs.readFileSync(path, 'utf-8')) as Checkpoint;
    return { net: SegNet.fromCheckpoint(checkpoint), checkpoint };
  }

  dispose(): void {
    for (const v of this.params.values()) v.dispose();
    this.params.clear();
  }
}
