import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';
import { beforeAll, describe, expect, test } from 'vitest';
import { TrainingConfigSchema } from '../src/config.js';
import { readCorpus } from '../src/corpus.js';
import { SegNet } from '../src/model.js';
import { initBackend } from '../src/tfjs.js';
import { Trainer, fineTune, trainOffline } from '../src/train.js';
import { fixture, testImage, testMask } from './support.js';

const config = (overrides: Record<string, unknown> = {}) => TrainingConfigSchema.parse(overrides);

beforeAll(async () => {
  await initBackend();
});

describe('offline training', () => {
  test('memorizing one sample drives the loss strictly down', () => {
    const { net, lossCurve } = trainOffline(fixture('corpus-solo'), config({ iterations: 50 }));
    try {
      expect(lossCurve).toHaveLength(50);
      for (let i = 1; i < lossCurve.length; i++) {
        expect(lossCurve[i], `iteration ${i}`).toBeLessThan(lossCurve[i - 1]);
      }
    } finally {
      net.dispose();
    }
  });

  test('the same seed reproduces the run exactly', () => {
    const cfg = config({ iterations: 8, base: 8, seed: 3 });
    const first = trainOffline(fixture('corpus-solo'), cfg);
    const second = trainOffline(fixture('corpus-solo'), cfg);
    try {
      expect(second.lossCurve).toEqual(first.lossCurve);
      const image = testImage(16, 16);
      const mask = testMask(16, 16);
      expect(second.net.predict(image, mask)).toEqual(first.net.predict(image, mask));
    } finally {
      first.net.dispose();
      second.net.dispose();
    }
  });

  test('an empty corpus is refused', () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), 'nb-empty-'));
    try {
      fs.writeFileSync(path.join(dir, 'index.json'), JSON.stringify({ samples: [] }));
      expect(() => trainOffline(dir, config())).toThrow(/is empty/);
    } finally {
      fs.rmSync(dir, { recursive: true, force: true });
    }
  });

  test('loss curves are recorded through the callback too', () => {
    const seen: number[] = [];
    const { net, lossCurve } = trainOffline(
      fixture('corpus-solo'),
      config({ iterations: 3, base: 8 }),
      (_iter, loss) => seen.push(loss),
    );
    net.dispose();
    expect(seen).toEqual(lossCurve);
  });
});

describe('the trainer', () => {
  const sampleAt = (w: number, h: number) => ({
    image: testImage(w, h),
    input: testMask(w, h),
    target: testMask(w, h),
  });

  test('mixed resolutions in one pool are refused', () => {
    const net = new SegNet(8, 0);
    const trainer = new Trainer(net, config({ base: 8 }));
    try {
      expect(() => trainer.run([sampleAt(8, 8), sampleAt(16, 16)], 1)).toThrow(
        /mixes resolutions: 8x8 and 16x16/,
      );
    } finally {
      trainer.dispose();
      net.dispose();
    }
  });

  test('an empty pool is refused', () => {
    const net = new SegNet(8, 0);
    const trainer = new Trainer(net, config({ base: 8 }));
    try {
      expect(() => trainer.run([], 1)).toThrow(/empty sample pool/);
    } finally {
      trainer.dispose();
      net.dispose();
    }
  });

  test('off-stride samples train through padding', () => {
    const net = new SegNet(8, 0);
    const trainer = new Trainer(net, config({ base: 8, batchSize: 2 }));
    try {
      const curve = trainer.run([sampleAt(6, 4)], 3);
      expect(curve).toHaveLength(3);
      for (const loss of curve) expect(Number.isFinite(loss)).toBe(true);
    } finally {
      trainer.dispose();
      net.dispose();
    }
  });

  test('fine-tuning runs its configured budget and learns', () => {
    const net = new SegNet(8, 0);
    try {
      const samples = readCorpus(fixture('corpus-solo'));
      const curve = fineTune(net, samples, config({ base: 8, fineTuneIterations: 30 }));
      expect(curve).toHaveLength(30);
      expect(curve[curve.length - 1]).toBeLessThan(curve[0]);
    } finally {
      net.dispose();
    }
  });
});
