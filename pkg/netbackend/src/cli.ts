#!/usr/bin/env node
/**
 * Command line entry points.
 *
 *     masktrack-netbackend serve --listen HOST:PORT | --stdio [--checkpoint F]
 *     masktrack-netbackend train --corpus DIR --out F [recipe flags]
 *
 * A JSON config file provides defaults; flags override it. Logs go to
 * stderr so the stdio transport owns stdout.
 */

import * as fs from 'node:fs';
import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';
import { NetBackend } from './backend.js';
import { BackendConfig, parseConfig } from './config.js';
import { initBackend } from './tfjs.js';
import { serveStdio, serveTcp } from './serve.js';
import { trainOffline } from './train.js';

interface CommonArgs {
  config?: string;
  checkpoint?: string;
  seed?: number;
  base?: number;
  batchSize?: number;
  learningRate?: number;
  lrPower?: number;
  momentum?: number;
  weightDecay?: number;
  iterations?: number;
  fineTuneIterations?: number;
}

const recipeFlags = {
  config: { type: 'string', describe: 'JSON config file; flags override it' },
  checkpoint: { type: 'string', describe: 'checkpoint to load' },
  seed: { type: 'number', describe: 'weight init and batch sampling seed' },
  base: { type: 'number', describe: 'network width' },
  'batch-size': { type: 'number' },
  'learning-rate': { type: 'number' },
  'lr-power': { type: 'number', describe: 'polynomial decay exponent' },
  momentum: { type: 'number' },
  'weight-decay': { type: 'number' },
  iterations: { type: 'number', describe: 'offline iteration budget' },
  'fine-tune-iterations': { type: 'number' },
} as const;

function buildConfig(args: CommonArgs, extra: Record<string, unknown> = {}): BackendConfig {
  const doc: Record<string, unknown> =
    args.config !== undefined ? JSON.parse(fs.readFileSync(args.config, 'utf-8')) : {};
  const flags: Record<string, unknown> = {
    checkpoint: args.checkpoint,
    seed: args.seed,
    base: args.base,
    batchSize: args.batchSize,
    learningRate: args.learningRate,
    lrPower: args.lrPower,
    momentum: args.momentum,
    weightDecay: args.weightDecay,
    iterations: args.iterations,
    fineTuneIterations: args.fineTuneIterations,
    ...extra,
  };
  for (const [key, value] of Object.entries(flags)) {
    if (value !== undefined) doc[key] = value;
  }
  return parseConfig(doc);
}

async function cmdServe(args: CommonArgs & { listen?: string; stdio?: boolean }): Promise<number> {
  const cfg = buildConfig(args, { listen: args.listen, stdio: args.stdio || undefined });
  if (cfg.listen === undefined && !cfg.stdio) {
    throw new Error('serve needs a transport: --listen host:port or --stdio');
  }
  await initBackend();
  const backend = NetBackend.fromConfig(cfg);
  if (cfg.stdio) {
    const served = await serveStdio(backend);
    console.error(`served ${served} requests`);
    return 0;
  }
  const [host, portText] = splitEndpoint(cfg.listen!);
  const served = await serveTcp(backend, host, Number(portText), (address) => {
    console.error(`listening on ${address.address}:${address.port}`);
  });
  console.error(`served ${served} requests`);
  return 0;
}

function splitEndpoint(endpoint: string): [string, string] {
  const at = endpoint.lastIndexOf(':');
  const host = endpoint.slice(0, at);
  return [host === '' ? '127.0.0.1' : host, endpoint.slice(at + 1)];
}

async function cmdTrain(args: CommonArgs & { corpus: string; out: string }): Promise<number> {
  const cfg = buildConfig(args);
  await initBackend();
  const { net, lossCurve } = trainOffline(args.corpus, cfg, (iter, loss) => {
    if (iter % 100 === 0) console.error(`iter ${iter} loss ${loss.toFixed(4)}`);
  });
  net.save(args.out, { lossCurve });
  const first = lossCurve[0];
  const last = lossCurve[lossCurve.length - 1];
  console.error(
    `trained ${lossCurve.length} iterations, loss ${first.toFixed(4)} -> ${last.toFixed(4)}`,
  );
  console.log(`saved checkpoint to ${args.out}`);
  return 0;
}

export async function main(argv: string[]): Promise<number> {
  try {
    let status = 2;
    await yargs(argv)
      .scriptName('masktrack-netbackend')
      .command(
        'serve',
        'answer wire-protocol requests',
        (y) =>
          y.options({
            ...recipeFlags,
            listen: { type: 'string', describe: 'TCP endpoint host:port' },
            stdio: { type: 'boolean', describe: 'serve over stdin/stdout' },
          }),
        async (args) => {
          status = await cmdServe(args as never);
        },
      )
      .command(
        'train',
        'train a checkpoint on an export-train corpus',
        (y) =>
          y.options({
            ...recipeFlags,
            corpus: { type: 'string', demandOption: true, describe: 'corpus directory' },
            out: { type: 'string', demandOption: true, describe: 'checkpoint file to write' },
          }),
        async (args) => {
          status = await cmdTrain(args as never);
        },
      )
      .demandCommand(1)
      .strict()
      .fail((msg, err) => {
        throw err ?? new Error(msg);
      })
      .parseAsync();
    return status;
  } catch (exc) {
    console.error(`error: ${exc instanceof Error ? exc.message : exc}`);
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (invokedDirectly) {
  main(hideBin(process.argv)).then((status) => process.exit(status));
}
