/**
 * Shipping gate for the backend. Every test prints a machine-greppable
 * verdict line; run `npx vitest run test/acceptance.test.ts` to see them.
 *
 * All three checks start from the committed offline checkpoint
 * (test/fixtures/pretrained.json, reproducible via `npm run pretrain`) and
 * drive the backend through real wire bytes recorded from the toolkit.
 */

import * as fs from 'node:fs';
import { beforeAll, describe, expect, test } from 'vitest';
import { NetBackend } from '../src/backend.js';
import { parseConfig } from '../src/config.js';
import { readMaskPng, readImagePng } from '../src/corpus.js';
import { initBackend } from '../src/tfjs.js';
import { serveStream } from '../src/serve.js';
import { ByteSource, encodeRequest } from '../src/wire.js';
import {
  CollectSink,
  SHUTDOWN_FRAME,
  bceLoss,
  dribble,
  fixture,
  iou,
  parseReplies,
  shiftMask,
  verdict,
} from './support.js';

// stock recipe, weights from the committed offline checkpoint
const trainedBackend = () =>
  NetBackend.fromConfig(parseConfig({ checkpoint: fixture('pretrained.json') }));

async function converse(backend: NetBackend, conversation: Buffer) {
  const sink = new CollectSink();
  const result = await serveStream(backend, new ByteSource(dribble(conversation, 65536)), sink);
  return { result, replies: parseReplies(sink.bytes()) };
}

beforeAll(async () => {
  await initBackend();
});

describe('wire conformance', () => {
  test('the golden conversation replays to protocol-valid responses', async () => {
    const conversation = fs.readFileSync(fixture('replay', 'conversation.bin'));
    const expected: { type: string; w?: number; h?: number; n?: number; contains?: string }[] =
      JSON.parse(fs.readFileSync(fixture('replay', 'expected.json'), 'utf-8'));
    const backend = trainedBackend();
    try {
      const { result, replies } = await converse(backend, conversation);
      let ok = result.shutdown && replies.length === expected.length;
      const notes: string[] = [];
      expected.forEach((want, i) => {
        const got = replies[i];
        if (got === undefined || got.type !== want.type) {
          ok = false;
          notes.push(`reply ${i} is ${got?.type ?? 'missing'}, wanted ${want.type}`);
          return;
        }
        if (got.type === 'scores') {
          const inRange = got.values.every((v) => Number.isFinite(v) && v >= 0 && v <= 1);
          if (got.w !== want.w || got.h !== want.h || !inRange) {
            ok = false;
            notes.push(`reply ${i} scores bad: ${got.w}x${got.h} inRange=${inRange}`);
          }
        } else if (got.type === 'error' && !got.message.includes(want.contains!)) {
          ok = false;
          notes.push(`reply ${i} error lacks "${want.contains}"`);
        } else if (got.type === 'ack' && got.n !== want.n) {
          ok = false;
          notes.push(`reply ${i} acked ${got.n}, wanted ${want.n}`);
        }
      });
      verdict(
        ok,
        'golden-conversation replay',
        notes.length > 0
          ? notes.join('; ')
          : `${replies.length} responses match the recorded schedule, shutdown honored`,
      );
    } finally {
      backend.dispose();
    }
  });
});

describe('online fine-tuning', () => {
  test('self-frame IoU reaches 0.8 after the wire-driven fine-tune', async () => {
    const frame = readImagePng(fixture('tune', 'frame.png'));
    const gt = readMaskPng(fixture('tune', 'gt.png')).data;
    const guides = [0, 1, 2, 3].map(
      (i) => readMaskPng(fixture('tune', 'guides', `${i}.png`)).data,
    );

    // one conversation: fine-tune on the shipped pool, then ask for the
    // tuned frame under four fresh guidance masks the pool never saw
    const conversation = Buffer.concat([
      fs.readFileSync(fixture('tune', 'finetune.bin')),
      ...guides.map((g) => encodeRequest(frame, g)),
      encodeRequest(frame, gt),
      SHUTDOWN_FRAME,
    ]);

    const backend = trainedBackend();
    try {
      const { replies } = await converse(backend, conversation);
      expect(replies[0]).toMatchObject({ type: 'ack' });

      const scored = replies.slice(1, 5).map((reply) => {
        expect(reply.type).toBe('scores');
        return reply.type === 'scores' ? iou(reply.values, gt) : 0;
      });
      const clean = replies[4 + 1];
      const cleanIou = clean?.type === 'scores' ? iou(clean.values, gt) : 0;

      const detail =
        scored.map((v, i) => `guide${i}=${v.toFixed(3)}`).join(' ') +
        ` (clean guidance ${cleanIou.toFixed(3)}, ungated)`;
      verdict(
        scored.every((v) => v >= 0.8),
        'fine-tuned self-frame IoU >= 0.8',
        detail,
      );
    } finally {
      backend.dispose();
    }
  }, 180_000);
});

describe('corruption robustness', () => {
  test('clean guidance never loses to heavily corrupted guidance', () => {
    // held-out evaluation: this frame's guidance masks were drawn fresh,
    // not from the training corpus; corruption shoves the guidance mostly
    // off the object
    const frame = readImagePng(fixture('tune', 'frame.png'));
    const gt = readMaskPng(fixture('tune', 'gt.png')).data;
    const corruptions: [string, Uint8Array][] = [
      ['shifted', shiftMask(gt, frame.width, frame.height, 24, 16)],
      ['inverted', Uint8Array.from(gt, (v) => (v !== 0 ? 0 : 255))],
    ];

    const backend = trainedBackend();
    try {
      const clean = bceLoss(backend.refine(frame, gt), gt);
      const losses = corruptions.map(
        ([name, mask]) => [name, bceLoss(backend.refine(frame, mask), gt)] as const,
      );
      const detail =
        `clean=${clean.toFixed(4)} ` + losses.map(([n, l]) => `${n}=${l.toFixed(4)}`).join(' ');
      verdict(
        losses.every(([, loss]) => clean <= loss),
        'clean-guidance loss <= corrupted-guidance loss',
        detail,
      );
    } finally {
      backend.dispose();
    }
  });
});
