/** Backend configuration: training recipe, checkpoint, transport. */

import * as fs from 'node:fs';
import { z } from 'zod';

const positiveInt = z.number().int().positive();
const positive = z.number().positive().finite();

/**
 * SGD recipe shared by offline training and online fine-tuning: mini-batches
 * of 10, polynomial decay from a 0.001 learning rate, momentum 0.9, weight
 * decay 0.0005. The iteration budget is the desk-scale knob; the online
 * fine-tune runs a fixed 200 iterations by default.
 */
export const TrainingConfigSchema = z.object({
  batchSize: positiveInt.default(10),
  learningRate: positive.default(0.001),
  /** Exponent of the polynomial decay: lr * (1 - i/budget)^power. */
  lrPower: positive.default(0.9),
  momentum: positive.default(0.9),
  weightDecay: positive.default(0.0005),
  iterations: positiveInt.default(2000),
  fineTuneIterations: positiveInt.default(200),
  /** Network width; channel counts scale with it. */
  base: positiveInt.default(16),
  seed: z.number().int().nonnegative().default(0),
});

export type TrainingConfig = z.infer<typeof TrainingConfigSchema>;

export const BackendConfigSchema = TrainingConfigSchema.extend({
  /** Weights to start from; omitted means a fresh random initialization. */
  checkpoint: z.string().optional(),
  /** TCP endpoint (host:port) to serve on; mutually exclusive with stdio. */
  listen: z.string().regex(/^.*:\d+$/, 'listen must look like host:port').optional(),
  stdio: z.boolean().default(false),
});

export type BackendConfig = z.infer<typeof BackendConfigSchema>;

export function parseConfig(doc: unknown): BackendConfig {
  const config = BackendConfigSchema.parse(doc);
  if (config.listen !== undefined && config.stdio) {
    throw new Error('choose one transport: --listen or --stdio');
  }
  return config;
}

export function loadConfigFile(path: string): BackendConfig {
  return parseConfig(JSON.parse(fs.readFileSync(path, 'utf-8')));
}
