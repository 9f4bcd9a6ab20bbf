/**
 * SGD training shared by offline runs and the online fine-tune: momentum,
 * weight decay on the matrices, polynomial learning-rate decay over the
 * iteration budget, per-pixel binary cross-entropy.
 */

import * as tf from '@tensorflow/tfjs';
import type { TrainingConfig } from './config.js';
import { readCorpus } from './corpus.js';
import { SegNet, STRIDE } from './model.js';
import type { TuneSample } from './wire.js';

/** Deterministic 32-bit PRNG for batch sampling (mulberry32). */
export function makeRng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/**
 * Flatten a sample to the network's 4-channel float input. Samples whose
 * resolution is off the network stride get zero-padded on the right and
 * bottom (black pixels, empty guidance), matching prediction-time padding.
 */
export function sampleInput(sample: TuneSample, padW?: number, padH?: number): Float32Array {
  const { width: w, height: h, channels } = sample.image;
  const W = padW ?? w;
  const out = new Float32Array(W * (padH ?? h) * 4);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const src = y * w + x;
      const dst = (y * W + x) * 4;
      if (channels === 3) {
        out[dst] = sample.image.data[src * 3] / 255;
        out[dst + 1] = sample.image.data[src * 3 + 1] / 255;
        out[dst + 2] = sample.image.data[src * 3 + 2] / 255;
      } else {
        const v = sample.image.data[src] / 255;
        out[dst] = v;
        out[dst + 1] = v;
        out[dst + 2] = v;
      }
      out[dst + 3] = sample.input[src] !== 0 ? 1 : 0;
    }
  }
  return out;
}

/** Target plane; padding pixels count as background. */
export function sampleTarget(sample: TuneSample, padW?: number, padH?: number): Float32Array {
  const { width: w, height: h } = sample.image;
  const W = padW ?? w;
  const out = new Float32Array(W * (padH ?? h));
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      out[y * W + x] = sample.target[y * w + x] !== 0 ? 1 : 0;
    }
  }
  return out;
}

/** Mean binary cross-entropy over every pixel of the batch. */
function bce(target: tf.Tensor, scores: tf.Tensor): tf.Scalar {
  const p = tf.clipByValue(scores, 1e-7, 1 - 1e-7);
  const perPixel = tf.add(
    tf.mul(target, tf.log(p)),
    tf.mul(tf.sub(1, target), tf.log(tf.sub(1, p))),
  );
  return tf.neg(tf.mean(perPixel));
}

/** One SGD walk over a fixed sample pool; returns the per-iteration loss. */
export class Trainer {
  private velocity = new Map<string, tf.Tensor>();

  constructor(
    private net: SegNet,
    private cfg: TrainingConfig,
  ) {}

  private step(x: tf.Tensor4D, y: tf.Tensor3D, lr: number): number {
    const { value, grads } = tf.variableGrads(
      () => bce(y, this.net.forward(x).squeeze([3])),
      [...this.net.params.values()],
    );
    for (const [engineName, grad] of Object.entries(grads)) {
      const name = SegNet.logicalName(engineName);
      const param = this.net.params.get(name);
      if (param === undefined) throw new Error(`gradient for unknown parameter ${name}`);
      tf.tidy(() => {
        const g = this.net.isDecayed(name)
          ? tf.add(grad, tf.mul(param, this.cfg.weightDecay))
          : grad;
        const prev = this.velocity.get(name);
        const vel = prev !== undefined ? tf.add(tf.mul(prev, this.cfg.momentum), g) : g;
        prev?.dispose();
        this.velocity.set(name, tf.keep(vel.clone()));
        param.assign(tf.sub(param, tf.mul(vel, lr)));
      });
      grad.dispose();
    }
    const loss = value.dataSync()[0];
    value.dispose();
    return loss;
  }

  /**
   * Run `iterations` batches sampled from the pool. Every sample must share
   * one resolution; batches draw uniformly with replacement.
   */
  run(samples: TuneSample[], iterations: number, onLoss?: (iter: number, loss: number) => void): number[] {
    if (samples.length === 0) throw new Error('cannot train on an empty sample pool');
    const { width: w, height: h } = samples[0].image;
    for (const s of samples) {
      if (s.image.width !== w || s.image.height !== h) {
        throw new Error(
          `training pool mixes resolutions: ${w}x${h} and ${s.image.width}x${s.image.height}`,
        );
      }
    }
    const W = Math.ceil(w / STRIDE) * STRIDE;
    const H = Math.ceil(h / STRIDE) * STRIDE;
    const inputs = samples.map((s) => sampleInput(s, W, H));
    const targets = samples.map((s) => sampleTarget(s, W, H));
    const rng = makeRng(this.cfg.seed);
    const { batchSize, learningRate, lrPower } = this.cfg;
    const curve: number[] = [];
    for (let iter = 0; iter < iterations; iter++) {
      const xb = new Float32Array(batchSize * H * W * 4);
      const yb = new Float32Array(batchSize * H * W);
      for (let k = 0; k < batchSize; k++) {
        const j = Math.floor(rng() * samples.length);
        xb.set(inputs[j], k * H * W * 4);
        yb.set(targets[j], k * H * W);
      }
      const x = tf.tensor4d(xb, [batchSize, H, W, 4]);
      const y = tf.tensor3d(yb, [batchSize, H, W]);
      const lr = learningRate * Math.pow(1 - iter / iterations, lrPower);
      const loss = this.step(x, y, lr);
      x.dispose();
      y.dispose();
      curve.push(loss);
      onLoss?.(iter, loss);
    }
    return curve;
  }

  dispose(): void {
    for (const v of this.velocity.values()) v.dispose();
    this.velocity.clear();
  }
}

export interface TrainResult {
  net: SegNet;
  lossCurve: number[];
}

/** Train a fresh network on an export-train corpus directory. */
export function trainOffline(
  corpusDir: string,
  cfg: TrainingConfig,
  onLoss?: (iter: number, loss: number) => void,
): TrainResult {
  const samples = readCorpus(corpusDir);
  if (samples.length === 0) {
    throw new Error(`corpus ${corpusDir} is empty`);
  }
  const net = new SegNet(cfg.base, cfg.seed);
  const trainer = new Trainer(net, cfg);
  try {
    const lossCurve = trainer.run(samples, cfg.iterations, onLoss);
    return { net, lossCurve };
  } finally {
    trainer.dispose();
  }
}

/** The online adaptation pass: a short SGD run on the shipped samples. */
export function fineTune(net: SegNet, samples: TuneSample[], cfg: TrainingConfig): number[] {
  const trainer = new Trainer(net, cfg);
  try {
    return trainer.run(samples, cfg.fineTuneIterations);
  } finally {
    trainer.dispose();
  }
}
