/** The learned refiner behind the wire protocol. */

import * as fs from 'node:fs';
import type { BackendConfig } from './config.js';
import { SegNet } from './model.js';
import { fineTune } from './train.js';
import type { ImagePayload, TuneSample } from './wire.js';

export class NetBackend {
  constructor(
    readonly net: SegNet,
    readonly cfg: BackendConfig,
  ) {}

  /** Load the configured checkpoint, or start from a fresh initialization. */
  static fromConfig(cfg: BackendConfig): NetBackend {
    if (cfg.checkpoint !== undefined) {
      if (!fs.existsSync(cfg.checkpoint)) {
        throw new Error(`checkpoint ${cfg.checkpoint} does not exist`);
      }
      return new NetBackend(SegNet.load(cfg.checkpoint).net, cfg);
    }
    return new NetBackend(new SegNet(cfg.base, cfg.seed), cfg);
  }

  refine(image: ImagePayload, mask: Uint8Array | null): Float32Array {
    return this.net.predict(image, mask);
  }

  /** Online adaptation on the shipped samples; returns the loss curve. */
  fineTune(samples: TuneSample[]): number[] {
    return fineTune(this.net, samples, this.cfg);
  }

  dispose(): void {
    this.net.dispose();
  }
}
